//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! COMET-CHECKPOINT\n
//! {json header}\n
//! <payload: little-endian f64 values>
//! ```
//!
//! The header carries the format version, the full run config, the number
//! of input variables, every parameter tensor shape, the training
//! activation set, the bank's entry ids per scale and the payload length in
//! values. The payload holds, in order: every parameter tensor (per scale:
//! series weights and biases per variable, core weight and bias, fusion
//! weight and bias, decoder weight and bias; then every codebook), each
//! bank scale's entries followed by its local scales, and finally the
//! standardizer mean, std and epsilon when present. Floats never pass
//! through text, so a round trip is bit-exact.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Standardizer;
use crate::error::{CometError, Result};
use crate::ndmath::{Matrix, Rng};
use crate::network::ModelParams;
use crate::pipeline::Detector;
use crate::train::Checkpoint;
use crate::vq::{ActivationSet, BankScale, MemoryBank};

pub const MAGIC: &str = "COMET-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    vars: usize,
    tensors: Vec<(usize, usize)>,
    activations: ActivationSet,
    n_sigma: usize,
    bank_ids: Vec<Vec<usize>>,
    standardized: bool,
    payload_len: usize,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let det = &ckpt.detector;
    let mut payload: Vec<f64> = Vec::new();
    let tensors = det.params.tensors();
    for t in &tensors {
        payload.extend_from_slice(t.data());
    }
    for bs in &det.bank.scales {
        payload.extend_from_slice(bs.entries.data());
        payload.extend_from_slice(&bs.sigmas);
    }
    if let Some(st) = &ckpt.stats {
        payload.extend_from_slice(&st.mean);
        payload.extend_from_slice(&st.std);
        payload.push(st.eps);
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: det.config.clone(),
        vars: det.params.num_vars(),
        tensors: tensors.iter().map(|t| t.shape()).collect(),
        activations: det.activations.clone(),
        n_sigma: det.bank.n_sigma,
        bank_ids: det.bank.scales.iter().map(|s| s.ids.clone()).collect(),
        standardized: ckpt.stats.is_some(),
        payload_len: payload.len(),
    };
    let mut out = Vec::with_capacity(payload.len() * 8 + 4096);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(msg: impl Into<String>) -> CometError {
    CometError::Format(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let magic_end = MAGIC.len();
    if bytes.len() <= magic_end || &bytes[..magic_end] != MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
        return Err(format_err("not a checkpoint file (bad magic line)"));
    }
    let rest = &bytes[magic_end + 1..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("truncated header"))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&rest[..nl]).map_err(|e| format_err(format!("corrupt header: {e}")))?;
    let found = raw.get("version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(FORMAT_VERSION)) {
        return Err(CometError::Version {
            found: found.unwrap_or(0),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| format_err(format!("corrupt header: {e}")))?;
    header.config.validate()?;

    let body = &rest[nl + 1..];
    if body.len() != header.payload_len * 8 {
        return Err(format_err(format!(
            "payload holds {} bytes, header promises {}",
            body.len(),
            header.payload_len * 8
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(format_err("payload shorter than the declared shapes"))
        }
    };

    let mut params = ModelParams::init(&header.config, header.vars, &mut Rng::new(0))?;
    {
        let mut targets = params.tensors_mut();
        if targets.len() != header.tensors.len() {
            return Err(format_err("tensor count does not match the config"));
        }
        for (t, &(r, c)) in targets.iter_mut().zip(&header.tensors) {
            if t.shape() != (r, c) {
                return Err(format_err(format!(
                    "tensor shape {:?} does not match the config's {:?}",
                    (r, c),
                    t.shape()
                )));
            }
            **t = Matrix::from_vec(r, c, take(r * c)?)?;
        }
    }
    let width = params.width();
    let mut scales = Vec::with_capacity(header.bank_ids.len());
    for (k, ids) in header.bank_ids.iter().enumerate() {
        let entries = Matrix::from_vec(ids.len(), width, take(ids.len() * width)?)?;
        let sigmas = take(ids.len())?;
        scales.push(BankScale {
            scale: k,
            ids: ids.clone(),
            entries,
            sigmas,
        });
    }
    let stats = if header.standardized {
        let mean = take(header.vars)?;
        let std = take(header.vars)?;
        let eps = take(1)?[0];
        Some(Standardizer { mean, std, eps })
    } else {
        None
    };
    Ok(Checkpoint {
        detector: Detector {
            config: header.config,
            params,
            activations: header.activations,
            bank: MemoryBank {
                n_sigma: header.n_sigma,
                scales,
            },
        },
        stats,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| CometError::io(path, e))?;
    f.write_all(&to_bytes(ckpt)).map_err(|e| CometError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CometError::io(path, e))?;
    from_bytes(&bytes)
}
