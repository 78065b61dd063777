//! Binary checkpoints: `SXPT` magic, format version, JSON metadata, a table
//! of named arrays, then little-endian array data.
//!
//! ```text
//! "SXPT" | u32 version | u64 meta_len | meta JSON | u32 count
//! count × { u32 name_len | name | u8 dtype | u32 rank | rank × u64 dim | u64 offset | u64 bytes }
//! data section (offsets are relative to its start)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::{attach_moe, DitConfig, StyleDit};
use crate::encoder::{EncoderConfig, StyleEncoder};
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::numeric::{Array, ParamStore};

pub const MAGIC: &[u8; 4] = b"SXPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F64,
    F32,
}

impl ElementType {
    fn code(self) -> u8 {
        match self {
            ElementType::F64 => 0,
            ElementType::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ElementType::F64),
            1 => Ok(ElementType::F32),
            _ => Err(Error::Format(format!("unknown element type code {c}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::F64 => 8,
            ElementType::F32 => 4,
        }
    }
}

/// What the arrays describe, enough to rebuild the model around them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Encoder {
        encoder: EncoderConfig,
    },
    Base {
        dit: DitConfig,
    },
    /// DiT with MoE sites plus the encoder that feeds its routers.
    Stylizer {
        dit: DitConfig,
        moe: MoeConfig,
        encoder: EncoderConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub seed: u64,
    pub iteration: u64,
    /// Resolved run configuration, when written by a command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, Array)>,
    /// Storage type of the data section.
    pub dtype: ElementType,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length exceeds address space".into()))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, arrays: Vec<(String, Array)>) -> Self {
        Self {
            meta,
            arrays,
            dtype: ElementType::F64,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, a) in &self.arrays {
            let bytes = (a.len() * self.dtype.size()) as u64;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(self.dtype.code());
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&bytes.to_le_bytes());
            offset += bytes;
        }
        for (_, a) in &self.arrays {
            for &v in a.data() {
                match self.dtype {
                    ElementType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    ElementType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = ElementType::from_code(r.u8()?)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let offset = r.len()?;
            let nbytes = r.len()?;
            let elems = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if elems.and_then(|e| e.checked_mul(dtype.size())) != Some(nbytes) {
                return Err(Error::Format(format!("array {name}: {nbytes} bytes do not match shape {shape:?}")));
            }
            table.push((name, dtype, shape, offset, nbytes));
        }
        let data = &bytes[r.pos..];
        let mut spans: Vec<(usize, usize)> = table.iter().map(|t| (t.3, t.4)).collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err(Error::Format("array data regions overlap".into()));
            }
        }
        let mut arrays = Vec::with_capacity(table.len());
        let mut dtype = ElementType::F64;
        for (name, dt, shape, offset, nbytes) in table {
            let raw = offset
                .checked_add(nbytes)
                .filter(|&e| e <= data.len())
                .map(|e| &data[offset..e])
                .ok_or_else(|| Error::Format(format!("array {name} extends past the end of the file")))?;
            let values: Vec<f64> = match dt {
                ElementType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                ElementType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            };
            dtype = dt;
            arrays.push((name, Array::new(shape, values)?));
        }
        Ok(Self { meta, arrays, dtype })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Array)> + 'a {
        self.arrays
            .iter()
            .filter_map(move |(n, a)| n.strip_prefix(prefix).map(|rest| (rest, a)))
    }
}

fn named(store: &ParamStore, prefix: &str) -> Vec<(String, Array)> {
    store.iter().map(|(n, a)| (format!("{prefix}{n}"), a.clone())).collect()
}

fn restore(store: &mut ParamStore, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let expected = store.len();
    let found = ckpt.with_prefix(prefix).count();
    if found != expected {
        return Err(Error::Format(format!("checkpoint holds {found} {prefix}* arrays, model has {expected}")));
    }
    store.load_named(ckpt.with_prefix(prefix))
}

pub fn encoder_checkpoint(encoder: &StyleEncoder, seed: u64, iteration: u64) -> Checkpoint {
    Checkpoint::new(
        CheckpointMeta {
            model: ModelSpec::Encoder {
                encoder: encoder.config().clone(),
            },
            seed,
            iteration,
            run_config: None,
        },
        named(encoder.store(), "encoder/"),
    )
}

pub fn base_checkpoint(model: &StyleDit, seed: u64, iteration: u64) -> Result<Checkpoint> {
    if model.moe().is_some() {
        return Err(Error::invalid("base checkpoint of a model with MoE sites"));
    }
    Ok(Checkpoint::new(
        CheckpointMeta {
            model: ModelSpec::Base { dit: model.config().clone() },
            seed,
            iteration,
            run_config: None,
        },
        named(model.store(), "dit/"),
    ))
}

pub fn stylizer_checkpoint(model: &StyleDit, encoder: &StyleEncoder, seed: u64, iteration: u64) -> Result<Checkpoint> {
    let moe = model.moe().ok_or_else(|| Error::invalid("stylizer checkpoint needs MoE sites"))?;
    let mut arrays = named(model.store(), "dit/");
    arrays.extend(named(encoder.store(), "encoder/"));
    Ok(Checkpoint::new(
        CheckpointMeta {
            model: ModelSpec::Stylizer {
                dit: model.config().clone(),
                moe: moe.config.clone(),
                encoder: encoder.config().clone(),
            },
            seed,
            iteration,
            run_config: None,
        },
        arrays,
    ))
}

/// The encoder stored in an encoder or stylizer checkpoint.
pub fn load_encoder(ckpt: &Checkpoint) -> Result<StyleEncoder> {
    let cfg = match &ckpt.meta.model {
        ModelSpec::Encoder { encoder } | ModelSpec::Stylizer { encoder, .. } => encoder.clone(),
        ModelSpec::Base { .. } => return Err(Error::Format("base checkpoint holds no encoder".into())),
    };
    let mut enc = StyleEncoder::new(cfg, 0)?;
    restore(enc.store_mut(), ckpt, "encoder/")?;
    Ok(enc)
}

/// The DiT of a base or stylizer checkpoint, with MoE sites re-attached for
/// the latter (base weights frozen as after attachment).
pub fn load_dit(ckpt: &Checkpoint) -> Result<StyleDit> {
    let mut model = match &ckpt.meta.model {
        ModelSpec::Base { dit } => StyleDit::new(dit.clone(), 0)?,
        ModelSpec::Stylizer { dit, moe, encoder } => attach_moe(StyleDit::new(dit.clone(), 0)?, moe, encoder.embedding_dim, 0)?,
        ModelSpec::Encoder { .. } => return Err(Error::Format("encoder checkpoint holds no diffusion model".into())),
    };
    restore(model.store_mut(), ckpt, "dit/")?;
    Ok(model)
}
