//! `LNLORA01` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "LNLORA01"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 header, one `key=value` per line, '\n'-terminated
//! offset 16+H          payload: tensors in manifest order, row-major f64
//! ```
//!
//! Manifest entries are header lines `tensor=<name>:f64:<d0>x<d1>x…`; every
//! other line is metadata and is preserved verbatim (and in order) on rewrite.
//! The payload length must equal `Σ 8·∏shape` exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, AdapterParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTParams};

pub const MAGIC: &[u8; 8] = b"LNLORA01";
pub const FORMAT_VERSION: &str = "1";

const TENSOR_KEY: &str = "tensor";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Non-manifest header lines, in file order.
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Replace the value of `key`, or append it.
    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Same metadata and tensors irrespective of order, comparing tensors
    /// bitwise.
    pub fn same_model(&self, other: &Checkpoint) -> bool {
        if self.tensors.len() != other.tensors.len() || self.meta.len() != other.meta.len() {
            return false;
        }
        self.meta.iter().all(|(k, v)| other.meta(k) == Some(v.as_str()))
            && self
                .tensors
                .iter()
                .all(|(n, t)| other.tensor(n).is_some_and(|o| o.bitwise_eq(t)))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') || k == TENSOR_KEY {
                return Err(Error::MalformedCheckpoint(format!("unencodable header entry `{k}`")));
            }
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let mut payload_len = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains([':', '\n']) {
                return Err(Error::MalformedCheckpoint(format!("unencodable tensor name `{name}`")));
            }
            if t.rank() == 0 {
                return Err(Error::MalformedCheckpoint(format!("tensor `{name}` has rank 0")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("{TENSOR_KEY}={name}:f64:{}\n", dims.join("x")));
            payload_len += 8 * t.numel();
        }
        let mut out = Vec::with_capacity(16 + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::NotACheckpoint);
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                actual: bytes.len() as u64,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let available = (bytes.len() - 16) as u64;
        if header_len > available {
            return Err(Error::Truncated {
                expected: header_len,
                actual: available,
            });
        }
        let header_end = 16 + header_len as usize;
        let header = std::str::from_utf8(&bytes[16..header_end])
            .map_err(|_| Error::MalformedCheckpoint("header is not UTF-8".into()))?;

        let mut meta = Vec::new();
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        for line in header.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::MalformedCheckpoint(format!("header line `{line}` lacks `=`")))?;
            if key == TENSOR_KEY {
                manifest.push(parse_manifest_entry(value)?);
            } else {
                meta.push((key.to_string(), value.to_string()));
            }
        }

        let mut expected: u64 = 0;
        for (name, shape) in &manifest {
            let numel = shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor `{name}` size overflows")))?;
            expected = expected
                .checked_add(numel)
                .ok_or_else(|| Error::MalformedCheckpoint("payload size overflows".into()))?;
        }
        let payload = &bytes[header_end..];
        let actual = payload.len() as u64;
        if actual < expected {
            return Err(Error::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(Error::MalformedCheckpoint(format!(
                "{} trailing bytes after the declared payload",
                actual - expected
            )));
        }

        let mut tensors = Vec::with_capacity(manifest.len());
        let mut offset = 0;
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = payload[offset..offset + 8 * numel]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * numel;
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(Error::MalformedCheckpoint(format!("duplicate tensor `{name}`")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Fails rather than overwrite unless `force`.
    pub fn write(&self, path: impl AsRef<Path>, force: bool) -> Result<()> {
        let path = path.as_ref();
        if !force && path.exists() {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn digest(&self) -> Result<String> {
        Ok(digest_bytes(&self.encode()?))
    }

    // ---- model conversions -------------------------------------------------

    pub fn from_vit(params: &ViTParams) -> Self {
        let mut meta = vec![
            ("format_version".to_string(), FORMAT_VERSION.to_string()),
            ("kind".to_string(), "base".to_string()),
        ];
        meta.extend(params.config.to_meta());
        Checkpoint {
            meta,
            tensors: params.store.named_tensors(),
        }
    }

    pub fn to_vit(&self) -> Result<ViTParams> {
        let cfg = ViTConfig::from_meta(|k| self.meta(k))?;
        ViTParams::from_tensors(cfg, &self.tensors)
    }

    pub fn vit_config(&self) -> Result<ViTConfig> {
        ViTConfig::from_meta(|k| self.meta(k))
    }

    /// Adapter-only checkpoint that names its base by content digest.
    pub fn from_adapters(adapters: &AdapterParams, base_digest: &str) -> Self {
        let mut meta = vec![
            ("format_version".to_string(), FORMAT_VERSION.to_string()),
            ("kind".to_string(), "adapter".to_string()),
            ("base_digest".to_string(), base_digest.to_string()),
        ];
        meta.extend(adapters.arch.to_meta());
        meta.extend(adapters.config.to_meta());
        Checkpoint {
            meta,
            tensors: adapters.store.named_tensors(),
        }
    }

    /// Load adapters, verifying they were trained against a base with
    /// `base_digest`.
    pub fn to_adapters(&self, base_digest: &str) -> Result<AdapterParams> {
        match self.meta("base_digest") {
            Some(d) if d == base_digest => {}
            Some(d) => {
                return Err(Error::Incompatible(format!(
                    "adapter checkpoint expects base digest {d}, got {base_digest}"
                )))
            }
            None => return Err(Error::MalformedCheckpoint("missing header key `base_digest`".into())),
        }
        let arch = ViTConfig::from_meta(|k| self.meta(k))?;
        let cfg = AdapterConfig::from_meta(|k| self.meta(k))?;
        AdapterParams::from_tensors(arch, cfg, &self.tensors)
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_manifest_entry(value: &str) -> Result<(String, Vec<usize>)> {
    let bad = || Error::MalformedCheckpoint(format!("bad manifest entry `{value}`"));
    let mut parts = value.rsplitn(3, ':');
    let dims = parts.next().ok_or_else(bad)?;
    let dtype = parts.next().ok_or_else(bad)?;
    let name = parts.next().ok_or_else(bad)?;
    if dtype != "f64" {
        return Err(Error::MalformedCheckpoint(format!("unsupported dtype `{dtype}` for `{name}`")));
    }
    let shape = dims
        .split('x')
        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(bad)?;
    Ok((name.to_string(), shape))
}
