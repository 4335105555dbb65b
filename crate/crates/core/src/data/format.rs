//! Binary trial-set format with a JSON sidecar manifest.
//!
//! ```text
//! "EEGT" | u16 version=1 | u32 n_trials, c, t, K, U | f32 sample_rate_hz
//! per trial: u16 label | u16 user | c·t f32 row-major samples
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

use super::synth::SynthSpec;
use super::trial::{Trial, TrialSet};

pub const TRIAL_MAGIC: &[u8; 4] = b"EEGT";
pub const TRIAL_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 5 * 4 + 4;

/// Sidecar metadata stored next to a trial file as `<basename>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub created_utc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_spec: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f32>,
}

impl Manifest {
    pub fn new(name: impl Into<String>) -> Self {
        Manifest {
            name: name.into(),
            created_utc: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            generator_spec: None,
            perturbed: None,
            rho: None,
        }
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Serializes a trial set into the binary layout.
pub fn write_trialset(ts: &TrialSet) -> Result<Vec<u8>> {
    let rate = ts.sample_rate_hz().unwrap_or(0.0);
    if ts.trials().iter().any(|t| t.sample_rate_hz != rate) {
        return Err(Error::Validation(
            "all trials must share one sample rate to be stored".into(),
        ));
    }
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} exceeds u32")))
    };
    let (c, t) = (ts.n_channels(), ts.n_timepoints());
    let mut out = Vec::with_capacity(HEADER_LEN + ts.len() * (4 + 4 * c * t));
    out.extend_from_slice(TRIAL_MAGIC);
    out.extend_from_slice(&TRIAL_VERSION.to_le_bytes());
    for (v, what) in [
        (ts.len(), "n_trials"),
        (c, "n_channels"),
        (t, "n_timepoints"),
        (ts.n_classes(), "n_classes"),
        (ts.n_users(), "n_users"),
    ] {
        out.extend_from_slice(&as_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&rate.to_le_bytes());
    for tr in ts.trials() {
        out.extend_from_slice(&tr.label.to_le_bytes());
        out.extend_from_slice(&tr.user.to_le_bytes());
        for v in tr.signal.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses the binary layout; `name` is attached to the resulting set.
pub fn read_trialset(bytes: &[u8], name: &str) -> Result<TrialSet, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != TRIAL_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(TRIAL_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let version = u16_at(bytes, 4);
    if version != TRIAL_VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: TRIAL_VERSION,
        });
    }
    let field = |i: usize| u32_at(bytes, 6 + 4 * i) as usize;
    let (n, c, t, k, u) = (field(0), field(1), field(2), field(3), field(4));
    let rate = f32::from_le_bytes(bytes[26..30].try_into().unwrap());
    if !(rate.is_finite() && rate > 0.0) {
        return Err(FormatError::Header(format!("invalid sample rate {rate}")));
    }
    if c == 0 || t == 0 || k == 0 || u == 0 {
        return Err(FormatError::Header(format!(
            "zero dimension in header (c={c}, t={t}, K={k}, U={u})"
        )));
    }
    let per_trial = 4 + 4 * c * t;
    let payload = &bytes[HEADER_LEN..];
    let expected = n
        .checked_mul(per_trial)
        .ok_or_else(|| FormatError::Header("declared payload overflows".into()))?;
    if payload.len() < expected {
        return Err(FormatError::Truncated(format!(
            "header declares {n} trials but only {} complete trials are present",
            payload.len() / per_trial
        )));
    }
    if payload.len() > expected {
        return Err(FormatError::ShapeMismatch(format!(
            "{} bytes of payload for {n} trials of {c}x{t} (expected {expected})",
            payload.len()
        )));
    }
    let mut trials = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * per_trial;
        let label = u16_at(payload, base);
        let user = u16_at(payload, base + 2);
        if label == 0 || usize::from(label) > k || user == 0 || usize::from(user) > u {
            return Err(FormatError::Header(format!(
                "trial {i} has label {label} / user {user} outside 1..={k} / 1..={u}"
            )));
        }
        let mut data = Vec::with_capacity(c * t);
        for j in 0..c * t {
            let at = base + 4 + 4 * j;
            let v = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite(HEADER_LEN + at));
            }
            data.push(v);
        }
        let signal = Tensor::from_parts(vec![c, t], data)
            .map_err(|e| FormatError::ShapeMismatch(e.to_string()))?;
        trials.push(Trial {
            signal,
            label,
            user,
            sample_rate_hz: rate,
        });
    }
    TrialSet::with_shape(name, trials, c, t, k, u).map_err(|e| FormatError::Header(e.to_string()))
}

/// Writes the binary file and a fresh manifest.
pub fn save_trialset(ts: &TrialSet, path: &Path) -> Result<()> {
    save_trialset_with(ts, path, Manifest::new(ts.name()))
}

pub fn save_trialset_with(ts: &TrialSet, path: &Path, manifest: Manifest) -> Result<()> {
    let bytes = write_trialset(ts)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Option<Manifest>> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Ok(None);
    }
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(Some(serde_json::from_slice(&text)?))
}

/// Reads a trial file; the set name comes from the manifest when present.
pub fn load_trialset(path: &Path) -> Result<TrialSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = match load_manifest(path)? {
        Some(m) => m.name,
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    Ok(read_trialset(&bytes, &name)?)
}
