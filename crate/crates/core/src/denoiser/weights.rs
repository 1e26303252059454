//! Binary weight files.
//!
//! Layout (little endian): magic `SHOI`, `u32` version, 32-byte SHA-256
//! architecture hash, `u32` length + JSON header, `u32` tensor count, then
//! per tensor `u32` name length, name bytes, `u32` rank, `u64` dims and
//! `f64` data. The hash covers the header JSON and every tensor name and
//! shape, so a file saved under one architecture is rejected by another.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::neural::{Adam, NeuralConfig};
use crate::autodiff::Tensor;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SHOI";
const VERSION: u32 = 1;

/// Everything needed to rebuild a denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub config: NeuralConfig,
    pub schedule: NoiseSchedule,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: NeuralConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<NoiseSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
}

/// SHA-256 over the header and the sorted tensor names and shapes.
pub fn architecture_hash(header_json: &str, tensors: &BTreeMap<String, Tensor>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(header_json.as_bytes());
    for (name, t) in tensors {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
    }
    h.finalize().into()
}

fn write_file(path: &Path, header: &Header, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let json = serde_json::to_string(header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&architecture_hash(&json, tensors));
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::WeightsFormat(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_file(path: &Path) -> Result<(Header, BTreeMap<String, Tensor>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::WeightsFormat("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::WeightsFormat(format!("unsupported version {version}")));
    }
    let hash: [u8; 32] = r.take(32, "architecture hash")?.try_into().expect("32 bytes");
    let len = r.u32("header length")? as usize;
    let json = std::str::from_utf8(r.take(len, "header")?)
        .map_err(|_| Error::WeightsFormat("header is not UTF-8".into()))?
        .to_string();
    let header: Header = serde_json::from_str(&json)?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::WeightsFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::WeightsFormat(format!("tensor `{name}` is too large")))?;
        let bytes = r.take(numel.checked_mul(8).unwrap_or(usize::MAX), &format!("data of `{name}`"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::WeightsFormat(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if architecture_hash(&json, &tensors) != hash {
        return Err(Error::WeightsFormat("architecture hash does not match contents".into()));
    }
    Ok((header, tensors))
}

pub fn save_weights(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: "weights".into(),
        config: bundle.config.clone(),
        schedule: Some(bundle.schedule.clone()),
        optimizer: None,
    };
    write_file(path.as_ref(), &header, &bundle.tensors)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let (header, tensors) = read_file(path.as_ref())?;
    if header.kind != "weights" {
        return Err(Error::WeightsFormat(format!("expected a weights file, found `{}`", header.kind)));
    }
    let schedule = header
        .schedule
        .ok_or_else(|| Error::WeightsFormat("missing noise schedule".into()))?;
    Ok(WeightBundle {
        config: header.config,
        schedule,
        tensors,
    })
}

/// Loads weights and checks them against an expected architecture.
pub fn load_weights_for(path: impl AsRef<Path>, expected: &NeuralConfig) -> Result<WeightBundle> {
    let bundle = load_weights(path)?;
    if &bundle.config != expected {
        let reference = super::NeuralDenoiser::new(expected.clone(), bundle.schedule.clone())?;
        for (name, t) in reference.tensors() {
            match bundle.tensors.get(name) {
                Some(found) if found.shape() == t.shape() => {}
                found => {
                    return Err(Error::ArchitectureMismatch {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: found.map(|f| f.shape().to_vec()).unwrap_or_default(),
                    })
                }
            }
        }
        if let Some(extra) = bundle.tensors.keys().find(|k| reference.tensors().all(|(n, _)| n != k.as_str())) {
            return Err(Error::ArchitectureMismatch {
                name: extra.clone(),
                expected: Vec::new(),
                found: bundle.tensors[extra].shape().to_vec(),
            });
        }
    }
    Ok(bundle)
}

/// Saves optimizer moments next to a model so training can resume.
pub fn save_optimizer(adam: &Adam, config: &NeuralConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (prefix, moments) in [("m", &adam.m), ("v", &adam.v)] {
        for (name, values) in moments {
            tensors.insert(format!("{prefix}.{name}"), Tensor::vector(values.clone()));
        }
    }
    let header = Header {
        kind: "optimizer".into(),
        config: config.clone(),
        schedule: None,
        optimizer: Some(AdamMeta {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            step: adam.step,
        }),
    };
    write_file(path.as_ref(), &header, &tensors)
}

pub fn load_optimizer(path: impl AsRef<Path>, expected: &NeuralConfig) -> Result<Adam> {
    let (header, tensors) = read_file(path.as_ref())?;
    let meta = match (header.kind.as_str(), header.optimizer) {
        ("optimizer", Some(meta)) => meta,
        (kind, _) => return Err(Error::WeightsFormat(format!("expected an optimizer file, found `{kind}`"))),
    };
    if &header.config != expected {
        return Err(Error::WeightsFormat("optimizer state belongs to a different architecture".into()));
    }
    let mut adam = Adam::new(meta.lr);
    adam.beta1 = meta.beta1;
    adam.beta2 = meta.beta2;
    adam.eps = meta.eps;
    adam.step = meta.step;
    for (key, t) in tensors {
        let (prefix, name) = key
            .split_once('.')
            .ok_or_else(|| Error::WeightsFormat(format!("bad optimizer entry `{key}`")))?;
        let target = match prefix {
            "m" => &mut adam.m,
            "v" => &mut adam.v,
            _ => return Err(Error::WeightsFormat(format!("bad optimizer entry `{key}`"))),
        };
        target.insert(name.to_string(), t.into_data());
    }
    Ok(adam)
}
