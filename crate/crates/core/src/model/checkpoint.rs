//! Checkpoint layout:
//!
//! ```text
//! "EEGM" | u16 version | u32 header_len | JSON header | f32 payload (LE)
//! ```
//! The header carries the model config, a tensor directory
//! `{name, shape, offset, len}` (offsets in bytes from the start of the
//! payload) and, optionally, the alignment state needed at inference time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::alignment::AlignmentState;
use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"EEGM";
pub const MODEL_VERSION: u16 = 1;

const R_BAR: &str = "alignment.r_bar";
const W: &str = "alignment.w";

/// Everything an inference pipeline needs: weights, config and alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub alignment: Option<AlignmentState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentHeader {
    n_trials_used: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
    payload_bytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alignment: Option<AlignmentHeader>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Checkpoint {
            config,
            params,
            alignment: None,
        }
    }

    pub fn with_alignment(mut self, state: AlignmentState) -> Self {
        self.alignment = Some(state);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(&str, &Tensor)> = self
            .params
            .tensors()
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        if let Some(a) = &self.alignment {
            named.push((R_BAR, &a.r_bar));
            named.push((W, &a.w));
        }
        let mut entries = Vec::with_capacity(named.len());
        let mut offset = 0;
        for (name, t) in &named {
            entries.push(Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += 4 * t.len();
        }
        let header = Header {
            config: self.config.clone(),
            tensors: entries,
            payload_bytes: offset,
            alignment: self.alignment.as_ref().map(|a| AlignmentHeader {
                n_trials_used: a.n_trials_used,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::Validation("checkpoint header too large".into()))?;
        let mut out = Vec::with_capacity(10 + json.len() + offset);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            }
            .into());
        }
        if bytes.len() < 10 {
            return Err(FormatError::Truncated("checkpoint preamble incomplete".into()).into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MODEL_VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: MODEL_VERSION,
            }
            .into());
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = &bytes[10..];
        if body.len() < header_len {
            return Err(FormatError::Truncated(format!(
                "header declares {header_len} bytes, {} available",
                body.len()
            ))
            .into());
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| FormatError::Header(e.to_string()))?;
        let payload = &body[header_len..];
        if payload.len() < header.payload_bytes {
            return Err(FormatError::Truncated(format!(
                "payload declares {} bytes, {} available",
                header.payload_bytes,
                payload.len()
            ))
            .into());
        }
        if payload.len() > header.payload_bytes {
            return Err(FormatError::ShapeMismatch(format!(
                "{} trailing payload bytes",
                payload.len() - header.payload_bytes
            ))
            .into());
        }
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if n != e.len {
                return Err(FormatError::ShapeMismatch(format!(
                    "'{}' has shape {:?} ({n} elements) but length {}",
                    e.name, e.shape, e.len
                ))
                .into());
            }
            let end = e
                .offset
                .checked_add(4 * e.len)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    FormatError::ShapeMismatch(format!("'{}' extends past the payload", e.name))
                })?;
            let data: Vec<f32> = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite(10 + header_len + e.offset + 4 * i).into());
            }
            named.push((e.name.clone(), Tensor::from_parts(e.shape.clone(), data)?));
        }
        let mut take = |name: &str| -> Option<Tensor> {
            let i = named.iter().position(|(n, _)| n == name)?;
            Some(named.remove(i).1)
        };
        let alignment = match header.alignment {
            Some(a) => {
                let r_bar = take(R_BAR);
                let w = take(W);
                match (r_bar, w) {
                    (Some(r_bar), Some(w)) => Some(AlignmentState {
                        r_bar,
                        w,
                        n_trials_used: a.n_trials_used,
                    }),
                    _ => {
                        return Err(FormatError::Header("alignment block without its tensors".into()).into())
                    }
                }
            }
            None => None,
        };
        header.config.validate()?;
        let params = ModelParams::from_named(&header.config, named)
            .map_err(|e| FormatError::ShapeMismatch(e.to_string()))?;
        Ok(Checkpoint {
            config: header.config,
            params,
            alignment,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::desk(4, 32, 2);
        let p = init_params(&cfg, 9).unwrap();
        Checkpoint::new(cfg, p).with_alignment(AlignmentState::identity(4))
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn tampered_length_is_shape_mismatch() {
        let bytes = sample().to_bytes().unwrap();
        let needle = b"\"len\":128";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("fixture expects the temporal kernel entry");
        let mut bad = bytes.clone();
        bad[pos + needle.len() - 1] = b'9';
        match Checkpoint::from_bytes(&bad) {
            Err(Error::Format(FormatError::ShapeMismatch(_))) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[5] = 7;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(FormatError::Version { .. }))
        ));
        bytes[0] = 0;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }
}
