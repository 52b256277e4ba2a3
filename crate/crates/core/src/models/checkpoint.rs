//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic          8 bytes  "MEMREGCK"
//! format_version u32
//! config_hash    u64      FNV-1a 64 of the metadata text
//! iteration      u64
//! meta_len       u32, then meta_len bytes of UTF-8 "key=value\n" lines
//! tensor_count   u32, then per tensor:
//!     name_len u32, name bytes, ndim u32, dims u64 x ndim, values f32 x prod(dims)
//! optim_count    u32, then per optimizer:
//!     name_len u32, name bytes, kind u8 (0 = sgd, 1 = adam), base_lr f64,
//!     hyper f64 x 3 (sgd: momentum, weight_decay, 0; adam: beta1, beta2, eps),
//!     step_count u64,
//!     first_count u32, then per buffer: len u64, f32 x len
//!     second_count u32, then per buffer: len u64, f32 x len
//! trailer        u64      FNV-1a 64 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{DiscConfig, Discriminator, Parameters, SegConfig, SegModel};
use crate::binio::{fnv1a, put_f32s, put_str, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEMREGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerRecord {
    pub name: String,
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub step_count: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerRecord {
    pub fn from_state(name: &str, s: &OptimizerState) -> Self {
        OptimizerRecord {
            name: name.to_string(),
            kind: s.kind,
            base_lr: s.base_lr,
            step_count: s.step_count,
            first: s.first.clone(),
            second: s.second.clone(),
        }
    }

    pub fn to_state(&self) -> OptimizerState {
        OptimizerState {
            kind: self.kind,
            base_lr: self.base_lr,
            first: self.first.clone(),
            second: self.second.clone(),
            step_count: self.step_count,
        }
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config_hash: u64,
    pub iteration: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
    pub optimizers: Vec<OptimizerRecord>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn collect(prefix: &str, model: &impl Parameters, out: &mut Vec<NamedTensor>) {
    for (name, t) in model.named_parameters() {
        out.push(NamedTensor {
            name: format!("{prefix}.{name}"),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        });
    }
}

impl ModelCheckpoint {
    pub fn capture(
        seg: &SegModel,
        discs: Option<(&Discriminator, &Discriminator)>,
        optimizers: &[(&str, &OptimizerState)],
        iteration: u64,
    ) -> Self {
        let c = &seg.config;
        let mut meta = vec![
            ("in_channels".to_string(), c.in_channels.to_string()),
            ("num_classes".to_string(), c.num_classes.to_string()),
            ("seg_widths".to_string(), join(&c.widths)),
            ("dropout".to_string(), c.dropout.to_string()),
        ];
        let mut tensors = Vec::new();
        collect("seg", seg, &mut tensors);
        if let Some((dp, da)) = discs {
            let d = &dp.config;
            meta.push(("disc_widths".into(), join(&d.widths)));
            meta.push(("disc_scales".into(), d.scale_count.to_string()));
            meta.push(("disc_leak".into(), d.leak.to_string()));
            collect("disc_p", dp, &mut tensors);
            collect("disc_a", da, &mut tensors);
        }
        let mut ck = ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: 0,
            iteration,
            meta,
            tensors,
            optimizers: optimizers
                .iter()
                .map(|(n, s)| OptimizerRecord::from_state(n, s))
                .collect(),
        };
        ck.config_hash = fnv1a(ck.meta_text().as_bytes());
        ck
    }

    fn meta_text(&self) -> String {
        self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta_value(key)
            .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` = `{raw}` is malformed")))
    }

    fn meta_list<const N: usize>(&self, key: &str) -> Result<[usize; N]> {
        let raw: String = self.meta_parse(key)?;
        let vals: Vec<usize> = raw
            .split(',')
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` = `{raw}` is malformed")))?;
        vals.try_into()
            .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` needs {N} entries")))
    }

    pub fn num_classes(&self) -> Result<usize> {
        self.meta_parse("num_classes")
    }

    pub fn has_discriminators(&self) -> bool {
        self.meta_value("disc_widths").is_some()
    }

    fn restore_into(&self, prefix: &str, model: &impl Parameters) -> Result<()> {
        for (name, t) in model.named_parameters() {
            let full = format!("{prefix}.{name}");
            let rec = self
                .tensors
                .iter()
                .find(|r| r.name == full)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{full}`")))?;
            if rec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{full}` has shape {:?} in checkpoint, model expects {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }

    pub fn seg_model(&self) -> Result<SegModel> {
        let config = SegConfig {
            in_channels: self.meta_parse("in_channels")?,
            num_classes: self.num_classes()?,
            widths: self.meta_list("seg_widths")?,
            dropout: self.meta_parse("dropout")?,
        };
        let model = SegModel::new(config, 0)?;
        self.restore_into("seg", &model)?;
        Ok(model)
    }

    /// `(D_p, D_a)` when the checkpoint carries discriminators.
    pub fn discriminators(&self) -> Result<Option<(Discriminator, Discriminator)>> {
        if !self.has_discriminators() {
            return Ok(None);
        }
        let config = DiscConfig {
            num_classes: self.num_classes()?,
            widths: self.meta_list("disc_widths")?,
            scale_count: self.meta_parse("disc_scales")?,
            leak: self.meta_parse("disc_leak")?,
        };
        let dp = Discriminator::new(config.clone(), 0)?;
        let da = Discriminator::new(config, 0)?;
        self.restore_into("disc_p", &dp)?;
        self.restore_into("disc_a", &da)?;
        Ok(Some((dp, da)))
    }

    pub fn optimizer(&self, name: &str) -> Option<OptimizerState> {
        self.optimizers.iter().find(|o| o.name == name).map(OptimizerRecord::to_state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&self.format_version.to_le_bytes());
        w.extend_from_slice(&self.config_hash.to_le_bytes());
        w.extend_from_slice(&self.iteration.to_le_bytes());
        put_str(&mut w, &self.meta_text());
        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut w, &t.name);
            w.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut w, &t.data);
        }
        w.extend_from_slice(&(self.optimizers.len() as u32).to_le_bytes());
        for o in &self.optimizers {
            put_str(&mut w, &o.name);
            let (tag, hyper) = match o.kind {
                OptimizerKind::SgdMomentum { momentum, weight_decay } => (0u8, [momentum, weight_decay, 0.0]),
                OptimizerKind::Adam { beta1, beta2, epsilon } => (1u8, [beta1, beta2, epsilon]),
            };
            w.push(tag);
            w.extend_from_slice(&o.base_lr.to_le_bytes());
            for h in hyper {
                w.extend_from_slice(&h.to_le_bytes());
            }
            w.extend_from_slice(&o.step_count.to_le_bytes());
            for bufs in [&o.first, &o.second] {
                w.extend_from_slice(&(bufs.len() as u32).to_le_bytes());
                for b in bufs {
                    w.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    put_f32s(&mut w, b);
                }
            }
        }
        let sum = fnv1a(&w);
        w.extend_from_slice(&sum.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 8 + 8 {
            return Err(r.err("file too short for trailer"));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if stored != fnv1a(&bytes[..body_end]) {
            return Err(Error::Format {
                offset: body_end as u64,
                detail: "checksum mismatch (truncated or corrupt file)".into(),
            });
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: r.pos,
        };
        let config_hash = r.u64()?;
        let iteration = r.u64()?;
        let meta_at = r.pos;
        let meta_text = r.string()?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                offset: meta_at as u64,
                detail: format!("metadata line `{line}` lacks `=`"),
            })?;
            meta.push((k.to_string(), v.to_string()));
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.err(format!("tensor `{name}` claims {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err(format!("tensor `{name}` shape overflows")))?;
            let data = r.f32s(count)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        let n_opt = r.u32()?;
        let mut optimizers = Vec::new();
        for _ in 0..n_opt {
            let name = r.string()?;
            let tag_at = r.pos;
            let tag = r.take(1)?[0];
            let base_lr = r.f64()?;
            let hyper = [r.f64()?, r.f64()?, r.f64()?];
            let kind = match tag {
                0 => OptimizerKind::SgdMomentum {
                    momentum: hyper[0],
                    weight_decay: hyper[1],
                },
                1 => OptimizerKind::Adam {
                    beta1: hyper[0],
                    beta2: hyper[1],
                    epsilon: hyper[2],
                },
                other => {
                    return Err(Error::Format {
                        offset: tag_at as u64,
                        detail: format!("unknown optimizer kind {other}"),
                    })
                }
            };
            let step_count = r.u64()?;
            let mut bufs = [Vec::new(), Vec::new()];
            for slot in &mut bufs {
                let n = r.u32()?;
                for _ in 0..n {
                    let len = r.u64()? as usize;
                    slot.push(r.f32s(len)?);
                }
            }
            let [first, second] = bufs;
            optimizers.push(OptimizerRecord {
                name,
                kind,
                base_lr,
                step_count,
                first,
                second,
            });
        }
        if r.pos != r.bytes.len() {
            return Err(r.err("trailing bytes before checksum"));
        }
        Ok(ModelCheckpoint {
            format_version: version,
            config_hash,
            iteration,
            meta,
            tensors,
            optimizers,
        })
    }

    /// Writes via a sibling temp file and rename, so readers never observe a
    /// partially written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
