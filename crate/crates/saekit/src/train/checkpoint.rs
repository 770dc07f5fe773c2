//! The SAEK checkpoint file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SAEK"  u32 version=1  u32 entry_count
//! per entry:
//!   u16 name_len  name (UTF-8)  u8 rank  u64 * rank extents  payload
//! ```
//!
//! Payloads are f32 values in row-major order, except the reserved entry
//! `config.json`, whose payload is the raw UTF-8 of the network config (a
//! rank-1 byte tensor; its extent is the byte count). Optimizer state lives
//! under the reserved prefixes `opt.m.<param>`, `opt.v.<param>`, and the
//! scalar `opt.step`. Everything else is a parameter or buffer under its
//! store name.
//!
//! Writes are deterministic (store order, then moments, then step, then
//! config), so identical states produce identical bytes and a load/save
//! round trip is byte-exact.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::adam::AdamState;

pub const MAGIC: [u8; 4] = *b"SAEK";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "config.json";
pub const OPT_STEP: &str = "opt.step";

/// A fully parsed checkpoint, rebuilt against its embedded config.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub store: ParamStore<f32>,
    /// Present when the checkpoint carried optimizer state. The learning
    /// rate is not serialized; resuming code sets it from the plan.
    pub opt: Option<AdamState<f32>>,
}

enum Payload<'a> {
    F32 { shape: &'a [usize], data: &'a [f32] },
    Bytes(&'a [u8]),
}

fn push_entry(out: &mut Vec<u8>, name: &str, payload: Payload<'_>) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::InvalidData(format!("entry name too long: {name}")));
    }
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    match payload {
        Payload::F32 { shape, data } => {
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::Bytes(bytes) => {
            out.push(1);
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
    }
    Ok(())
}

/// Serializes parameters, buffers, optimizer state, and the config document.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    opt: Option<&AdamState<f32>>,
    config: &NetworkConfig,
) -> Result<()> {
    let mut entries: Vec<(String, Payload<'_>)> = Vec::new();
    for name in store.param_names() {
        let t = store.param(name)?;
        entries.push((name.to_string(), Payload::F32 { shape: t.shape(), data: t.data() }));
    }
    for name in store.buffer_names() {
        let t = store.buffer(name)?;
        entries.push((name.to_string(), Payload::F32 { shape: t.shape(), data: t.data() }));
    }
    let step_value;
    if let Some(opt) = opt {
        for name in store.param_names() {
            if let Some(m) = opt.moment_m(name) {
                entries.push((
                    format!("opt.m.{name}"),
                    Payload::F32 { shape: m.shape(), data: m.data() },
                ));
            }
        }
        for name in store.param_names() {
            if let Some(v) = opt.moment_v(name) {
                entries.push((
                    format!("opt.v.{name}"),
                    Payload::F32 { shape: v.shape(), data: v.data() },
                ));
            }
        }
        step_value = [opt.step as f32];
        entries.push((OPT_STEP.into(), Payload::F32 { shape: &[1], data: &step_value }));
    }
    let config_text = config.to_json();
    entries.push((CONFIG_ENTRY.into(), Payload::Bytes(config_text.as_bytes())));

    let mut seen = std::collections::HashSet::new();
    for (name, _) in &entries {
        if !seen.insert(name.clone()) {
            return Err(Error::CkptDuplicate(name.clone()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, payload) in entries {
        push_entry(&mut out, &name, payload)?;
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CkptTruncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// The raw tensor table: every f32 entry in file order, plus the config
/// text. Checked for magic, version, duplicates, and exact length.
pub struct RawCheckpoint {
    pub tensors: IndexMap<String, Tensor<f32>>,
    pub config_json: String,
}

pub fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CkptBadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CkptVersion(version));
    }
    let count = r.u32()? as usize;
    let mut tensors = IndexMap::new();
    let mut config_json = None;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::InvalidData("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        let rank = *r.take(1)?.first().unwrap() as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if name == CONFIG_ENTRY {
            let text = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::InvalidData("config entry is not UTF-8".into()))?
                .to_string();
            if config_json.replace(text).is_some() {
                return Err(Error::CkptDuplicate(CONFIG_ENTRY.into()));
            }
        } else {
            let raw = r.take(4 * n)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::CkptDuplicate(name));
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidData("checkpoint has trailing bytes".into()));
    }
    let config_json =
        config_json.ok_or_else(|| Error::InvalidData("checkpoint lacks a config entry".into()))?;
    Ok(RawCheckpoint { tensors, config_json })
}

/// Loads and validates a checkpoint against its own embedded config: every
/// declared parameter and buffer must be present with its declared shape,
/// and nothing unexplained may remain.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = read_raw(path)?;
    let config = NetworkConfig::from_json(&raw.config_json)?;
    let (defs, bufs) = config.param_defs()?;

    let mut store = ParamStore::<f32>::init(&[], &[], 0)?;
    for def in &defs {
        let t = raw.tensors.shift_remove(&def.name).ok_or_else(|| {
            Error::InvalidData(format!("checkpoint missing parameter {}", def.name))
        })?;
        if t.shape() != def.shape {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: def.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        store.insert_param(&def.name, t)?;
    }
    for buf in &bufs {
        let t = raw.tensors.shift_remove(&buf.name).ok_or_else(|| {
            Error::InvalidData(format!("checkpoint missing buffer {}", buf.name))
        })?;
        store.insert_buffer(&buf.name, t)?;
    }

    let opt = match raw.tensors.shift_remove(OPT_STEP) {
        Some(step_t) => {
            let mut opt = AdamState::new(crate::train::adam::DEFAULT_LR);
            opt.step = step_t.data()[0] as u64;
            for def in &defs {
                let m = raw.tensors.shift_remove(&format!("opt.m.{}", def.name));
                let v = raw.tensors.shift_remove(&format!("opt.v.{}", def.name));
                match (m, v) {
                    (Some(m), Some(v)) => opt.set_moments(&def.name, m, v),
                    (None, None) => {}
                    _ => {
                        return Err(Error::InvalidData(format!(
                            "checkpoint has a lone moment for {}",
                            def.name
                        )))
                    }
                }
            }
            Some(opt)
        }
        None => None,
    };

    if let Some((name, _)) = raw.tensors.first() {
        return Err(Error::UnknownParam(name.clone()));
    }
    Ok(Checkpoint { config, store, opt })
}
