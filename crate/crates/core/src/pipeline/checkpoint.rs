//! Checkpoint container: text manifest plus a flat little-endian f32 payload.
//!
//! Layout: the 8-byte magic `PLMCKPT1`, the header length as a little-endian
//! u64, the UTF-8 header, then the payload. The header holds
//!
//! ```text
//! stage=<n>
//! [config]
//! <key>=<value>
//! [vocab]
//! <token>
//! [tensors]
//! <name> <rows> <cols> <offset> <provenance>
//! ```
//!
//! with config keys and tensor names in lexicographic order, vocabulary in
//! id order, and offsets counted in f32 elements.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Provenance};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"PLMCKPT1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub stage: u8,
    pub config: BTreeMap<String, String>,
    pub vocab: Vec<String>,
    pub params: ParamStore,
}

fn manifest(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

impl Checkpoint {
    pub fn new(stage: u8, params: ParamStore) -> Self {
        Self {
            stage,
            params,
            ..Self::default()
        }
    }

    pub fn set_config(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.config.insert(key.into(), value.into());
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }

    pub fn is_upcycled(&self) -> bool {
        self.params.names().any(|n| n.ends_with("moe.gate"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("stage={}\n[config]\n", self.stage);
        for (k, v) in &self.config {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str("[vocab]\n");
        for t in &self.vocab {
            header.push_str(t);
            header.push('\n');
        }
        header.push_str("[tensors]\n");
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let (r, c) = t.value.shape();
            header.push_str(&format!("{name} {r} {c} {offset} {}\n", t.provenance));
            offset += r * c;
        }
        let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in self.params.iter() {
            for v in t.value.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(manifest("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| manifest("header length exceeds file size"))?;
        let header = std::str::from_utf8(&bytes[16..header_end])
            .map_err(|_| manifest("header is not UTF-8"))?;
        let payload = &bytes[header_end..];
        if !payload.len().is_multiple_of(4) {
            return Err(manifest("payload is not a whole number of f32 values"));
        }

        let mut lines = header.lines();
        let stage = lines
            .next()
            .and_then(|l| l.strip_prefix("stage="))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| manifest("missing stage line"))?;
        if lines.next() != Some("[config]") {
            return Err(manifest("missing [config] section"));
        }
        let mut ckpt = Checkpoint {
            stage,
            ..Self::default()
        };
        let mut section = "config";
        let mut expected_offset = 0usize;
        let mut last_name: Option<String> = None;
        for line in lines {
            match line {
                "[vocab]" if section == "config" => {
                    section = "vocab";
                    continue;
                }
                "[tensors]" if section == "vocab" => {
                    section = "tensors";
                    continue;
                }
                _ => {}
            }
            match section {
                "config" => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| manifest(format!("bad config line '{line}'")))?;
                    ckpt.config.insert(k.to_string(), v.to_string());
                }
                "vocab" => ckpt.vocab.push(line.to_string()),
                _ => {
                    let f: Vec<&str> = line.split(' ').collect();
                    if f.len() != 5 {
                        return Err(manifest(format!("bad tensor line '{line}'")));
                    }
                    let num = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| manifest(format!("bad number '{s}' in '{line}'")))
                    };
                    let (rows, cols, offset) = (num(f[1])?, num(f[2])?, num(f[3])?);
                    let provenance: Provenance = f[4].parse()?;
                    if last_name.as_deref().is_some_and(|p| p >= f[0]) {
                        return Err(manifest(format!("tensor '{}' out of order", f[0])));
                    }
                    if offset != expected_offset {
                        return Err(manifest(format!(
                            "tensor '{}' at offset {offset}, expected {expected_offset}",
                            f[0]
                        )));
                    }
                    let n = rows * cols;
                    let end = (offset + n) * 4;
                    if end > payload.len() {
                        return Err(manifest(format!("tensor '{}' runs past payload", f[0])));
                    }
                    let data = payload[offset * 4..end]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                        .collect();
                    ckpt.params
                        .insert(f[0], Mat::from_vec(rows, cols, data), provenance);
                    expected_offset += n;
                    last_name = Some(f[0].to_string());
                }
            }
        }
        if section != "tensors" {
            return Err(manifest("missing [vocab] or [tensors] section"));
        }
        if expected_offset * 4 != payload.len() {
            return Err(manifest("payload longer than manifest"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
