//! Encoder checkpoints.
//!
//! Layout: the 8-byte magic `ULIPCKPT`, a `u32` LE format version, a `u32`
//! LE header length, a JSON header, then every parameter block as raw LE
//! `f32` in the order the header lists. The temperature is stored as a
//! one-element block so that it round-trips bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ClassifierHead, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;
use crate::train::Temperature;

const MAGIC: &[u8; 8] = b"ULIPCKPT";
pub const VERSION: u32 = 1;
const TEMPERATURE_BLOCK: &str = "temperature.log_inv";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub temperature: Temperature,
    pub head: Option<ClassifierHead>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct BlockSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    widths: Vec<usize>,
    embed_dim: usize,
    init_seed: u64,
    inv_temperature: f32,
    clamp_max: f32,
    head_classes: Option<usize>,
    metadata: serde_json::Value,
    blocks: Vec<BlockSpec>,
}

impl Checkpoint {
    pub fn new(encoder: EncoderParams) -> Self {
        Checkpoint { encoder, temperature: Temperature::default(), head: None, metadata: serde_json::Value::Null }
    }

    fn named_blocks(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.encoder.blocks().into_iter().map(|(n, t)| (n, t.clone())).collect();
        out.push((TEMPERATURE_BLOCK.into(), Tensor::scalar(self.temperature.s())));
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), h.weight.clone()));
            out.push(("head.bias".into(), h.bias.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blocks = self.named_blocks();
        let header = Header {
            widths: self.encoder.config().widths.clone(),
            embed_dim: self.encoder.embed_dim(),
            init_seed: self.encoder.seed(),
            inv_temperature: self.temperature.inv_tau(),
            clamp_max: self.temperature.clamp_max(),
            head_classes: self.head.as_ref().map(ClassifierHead::classes),
            metadata: self.metadata.clone(),
            blocks: blocks.iter().map(|(n, t)| BlockSpec { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &blocks {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadHeader { path: path.to_owned(), reason };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic { path: path.to_owned(), expected: "ULIPCKPT" });
        }
        if bytes.len() < 16 {
            return Err(Error::TruncatedFile(path.to_owned()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body_start = 16 + header_len;
        if bytes.len() < body_start {
            return Err(Error::TruncatedFile(path.to_owned()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(e.to_string()))?;
        let floats: usize = header.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
        let body = &bytes[body_start..];
        if body.len() < floats * 4 {
            return Err(Error::TruncatedFile(path.to_owned()));
        }
        if body.len() > floats * 4 {
            return Err(bad("trailing bytes after parameter blocks".into()));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.blocks.len());
        for spec in &header.blocks {
            let n: usize = spec.shape.iter().product();
            let data = body[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            tensors.push((spec.name.as_str(), Tensor::new(spec.shape.clone(), data).map_err(|e| bad(e.to_string()))?));
        }

        let encoder_blocks = 2 * (header.widths.len() + 1);
        let expected_extra = 1 + if header.head_classes.is_some() { 2 } else { 0 };
        if tensors.len() != encoder_blocks + expected_extra {
            return Err(bad(format!("{} blocks do not match the declared architecture", tensors.len())));
        }
        let mut rest = tensors.split_off(encoder_blocks).into_iter();
        let config = EncoderConfig { widths: header.widths, embed_dim: header.embed_dim };
        let encoder = EncoderParams::from_blocks(header.init_seed, config, tensors.into_iter().map(|(_, t)| t).collect())?;

        let (name, s) = rest.next().expect("temperature block counted above");
        if name != TEMPERATURE_BLOCK || !s.is_scalar() {
            return Err(bad(format!("expected {TEMPERATURE_BLOCK}, found {name}")));
        }
        let temperature = Temperature::from_log(s.item(), header.clamp_max)?;
        let head = match (rest.next(), rest.next()) {
            (Some((_, w)), Some((_, b))) => Some(ClassifierHead::new(w, b)?),
            _ => None,
        };
        Ok(Checkpoint { encoder, temperature, head, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_head: bool) -> Checkpoint {
        let encoder = EncoderParams::init(3, &[8, 16], 12).unwrap();
        Checkpoint {
            encoder,
            temperature: Temperature::new(20.0, 100.0).unwrap(),
            head: with_head.then(|| ClassifierHead::init(1, 12, 5).unwrap()),
            metadata: serde_json::json!({"epochs": 3, "note": "x"}),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for with_head in [false, true] {
            let ck = sample(with_head);
            let path = dir.path().join(format!("c{with_head}.ckpt"));
            ck.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded, ck);
            assert_eq!(loaded.temperature.s().to_bits(), ck.temperature.s().to_bits());
            assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = sample(false).to_bytes();
        let p = Path::new("x.ckpt");
        let mut wrong = bytes.clone();
        wrong[3] = b'?';
        assert!(matches!(Checkpoint::from_bytes(&wrong, p), Err(Error::BadMagic { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2], p), Err(Error::TruncatedFile(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer, p), Err(Error::BadHeader { .. })));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version, p), Err(Error::BadHeader { .. })));
    }
}
