//! Flat named-tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"UTNT"  u32 version  u32 meta_len  meta_len bytes of JSON metadata
//! u32 count, then per tensor:
//!   u32 name_len  name (UTF-8)  u8 dtype (0 = f64, 1 = f32)
//!   u32 ndim  ndim × u64 extents  numel × dtype values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::backbone::{Backbone, BackboneConfig};
use crate::composer::{compose, ComposedModel, UTuningConfig};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};
use crate::train::{SyntheticTask, TaskConfig};

pub const MAGIC: &[u8; 4] = b"UTNT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utuning: Option<UTuningConfig>,
    /// Task the weights were trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckpointMeta {
    pub fn new(backbone: BackboneConfig) -> Self {
        CheckpointMeta {
            backbone,
            utuning: None,
            task: None,
            task_seed: None,
            note: None,
        }
    }

    pub fn with_task(mut self, task: Option<&SyntheticTask>) -> Self {
        self.task = task.map(|t| t.config.clone());
        self.task_seed = task.map(|t| t.seed);
        self
    }

    /// Rebuilds the recorded task, if any.
    pub fn synthetic_task(&self) -> Result<Option<SyntheticTask>> {
        match (&self.task, self.task_seed) {
            (Some(c), Some(seed)) => SyntheticTask::new(c.clone(), seed).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large ({n})")))
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint, dtype: Precision) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let meta = serde_json::to_vec(&ckpt.meta)?;
    put_u32(w, len_u32(meta.len(), "metadata")?)?;
    w.write_all(&meta)?;
    put_u32(w, len_u32(ckpt.tensors.len(), "tensor count")?)?;
    for (name, t) in &ckpt.tensors {
        put_u32(w, len_u32(name.len(), "name")?)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[match dtype {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }])?;
        put_u32(w, len_u32(t.ndim(), "rank")?)?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for &v in t.data() {
            match dtype {
                Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        buf: &bytes,
        pos: 0,
    };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a tensor file".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let n = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let dtype = c.take(1, "dtype")?[0];
        let ndim = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                usize::try_from(c.u64("extent")?)
                    .map_err(|_| Error::Format("extent overflow".into()))?,
            );
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            0 => c
                .take(numel * 8, &name)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            1 => c
                .take(numel * 4, &name)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(Error::Format(format!(
                    "tensor `{name}`: unknown dtype {other}"
                )))
            }
        };
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(Checkpoint { meta, tensors })
}

fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(_, v)| (v.name.clone(), v.value.clone()))
        .collect()
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt, Precision::F64)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path)?;
    read_checkpoint(&mut f)
}

pub fn save_backbone(path: &Path, backbone: &Backbone, task: Option<&SyntheticTask>) -> Result<()> {
    save(
        path,
        &Checkpoint {
            meta: CheckpointMeta::new(backbone.config.clone()).with_task(task),
            tensors: store_tensors(&backbone.params),
        },
    )
}

pub fn save_model(path: &Path, model: &ComposedModel, task: Option<&SyntheticTask>) -> Result<()> {
    let mut meta = CheckpointMeta::new(model.backbone.config.clone()).with_task(task);
    meta.utuning = Some(model.config.clone());
    save(
        path,
        &Checkpoint {
            meta,
            tensors: store_tensors(model.params()),
        },
    )
}

impl Checkpoint {
    /// Backbone tensors only (tuner entries are ignored).
    pub fn backbone(&self) -> Result<Backbone> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if !name.starts_with("tuner.") {
                store.add(name.clone(), t.clone(), true)?;
            }
        }
        let expected = self.meta.backbone.param_plan().len();
        if store.len() != expected {
            return Err(Error::Format(format!(
                "{} backbone tensors in file, config needs {expected}",
                store.len()
            )));
        }
        Backbone::from_params(self.meta.backbone.clone(), store)
    }

    /// Rebuilds a composed model; a file without tuner config gives an empty composition.
    pub fn model(&self) -> Result<ComposedModel> {
        let bb = self.backbone()?;
        let cfg = self.meta.utuning.clone().unwrap_or_default();
        let mut model = compose(&bb, &cfg, 0)?;
        let store = model.params_mut();
        let mut seen = 0;
        for (name, t) in &self.tensors {
            if let Some(id) = store.id(name) {
                let var = store.get_mut(id);
                if var.value.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        var.value.shape()
                    )));
                }
                var.value = t.clone();
                seen += 1;
            } else {
                return Err(Error::Format(format!(
                    "tensor `{name}` does not belong to the configured model"
                )));
            }
        }
        if seen != store.len() {
            let missing: Vec<String> = store
                .iter()
                .filter(|(_, v)| !self.tensors.iter().any(|(n, _)| *n == v.name))
                .map(|(_, v)| v.name.clone())
                .collect();
            return Err(Error::Format(format!(
                "missing tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(model)
    }
}
