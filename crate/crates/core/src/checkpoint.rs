//! Single-file parameter checkpoints.
//!
//! A checkpoint is one JSON header line followed by the raw little-endian f64
//! payload of every tensor in declaration order.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::contrastive::LossVariant;
use crate::diffcore::Matrix;
use crate::encoder::{EncoderDims, EncoderError, EncoderParams};
use crate::envs::Family;
use crate::iql::{IqlDims, IqlError, IqlParams};

pub const CHECKPOINT_MAGIC: &str = "hsomrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("expected a {expected} checkpoint, found {got}")]
    Kind { expected: CheckpointKind, got: CheckpointKind },
    #[error("payload holds {got} bytes, header declares {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("payload checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Iql(#[from] IqlError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Encoder,
    Policy,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckpointKind::Encoder => "encoder",
            CheckpointKind::Policy => "policy",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMeta {
    pub dims: IqlDims,
    pub hidden: Vec<usize>,
    pub policy_std: f64,
    /// Payload checksum of the frozen encoder the policy was trained with.
    pub encoder_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub magic: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub family: Family,
    pub seed: u64,
    pub variant: Option<LossVariant>,
    pub encoder: EncoderDims,
    pub policy: Option<PolicyMeta>,
    pub shapes: Vec<(usize, usize)>,
    pub payload_sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn payload(tensors: &[&Matrix]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.len() * 8).sum());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn encode(header: &CheckpointHeader, body: &[u8]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("checkpoint header serializes");
    out.push(b'\n');
    out.extend_from_slice(body);
    out
}

/// Splits and verifies a checkpoint, returning its header and tensors.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Matrix>), CheckpointError> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Header(format!("bad magic `{}`", header.magic)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    let body = &bytes[split + 1..];
    let expected: usize = header.shapes.iter().map(|(r, c)| r * c * 8).sum();
    if body.len() != expected {
        return Err(CheckpointError::PayloadLength {
            expected,
            got: body.len(),
        });
    }
    if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
        return Err(CheckpointError::Checksum);
    }
    let mut tensors = Vec::with_capacity(header.shapes.len());
    let mut chunks = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for &(r, c) in &header.shapes {
        let data: Vec<f64> = chunks.by_ref().take(r * c).collect();
        tensors.push(Matrix::new(r, c, data).map_err(|e| CheckpointError::Header(e.to_string()))?);
    }
    Ok((header, tensors))
}

fn read(path: &Path, kind: CheckpointKind) -> Result<(CheckpointHeader, Vec<Matrix>), CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, tensors) = decode(&bytes)?;
    if header.kind != kind {
        return Err(CheckpointError::Kind {
            expected: kind,
            got: header.kind,
        });
    }
    Ok((header, tensors))
}

fn header_for(kind: CheckpointKind, family: Family, seed: u64, encoder: EncoderDims, tensors: &[&Matrix], body: &[u8]) -> CheckpointHeader {
    CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        kind,
        family,
        seed,
        variant: None,
        encoder,
        policy: None,
        shapes: tensors.iter().map(|t| t.shape()).collect(),
        payload_sha256: hex::encode(Sha256::digest(body)),
    }
}

pub fn encoder_bytes(params: &EncoderParams, family: Family, seed: u64, variant: LossVariant) -> Vec<u8> {
    let tensors = params.tensors();
    let body = payload(&tensors);
    let mut header = header_for(CheckpointKind::Encoder, family, seed, params.dims.clone(), &tensors, &body);
    header.variant = Some(variant);
    encode(&header, &body)
}

pub fn save_encoder(path: &Path, params: &EncoderParams, family: Family, seed: u64, variant: LossVariant) -> Result<(), CheckpointError> {
    fs::write(path, encoder_bytes(params, family, seed, variant)).map_err(io_err(path))
}

pub fn load_encoder(path: &Path) -> Result<(CheckpointHeader, EncoderParams), CheckpointError> {
    let (header, tensors) = read(path, CheckpointKind::Encoder)?;
    let mut params = EncoderParams::new(header.encoder.clone(), 0);
    params.set_tensors(tensors)?;
    Ok((header, params))
}

/// Policy checkpoints carry the encoder layout and payload hash they depend on.
pub fn policy_bytes(params: &IqlParams, hidden: &[usize], encoder: &CheckpointHeader, seed: u64) -> Vec<u8> {
    let tensors = params.tensors();
    let body = payload(&tensors);
    let mut header = header_for(CheckpointKind::Policy, encoder.family, seed, encoder.encoder.clone(), &tensors, &body);
    header.variant = encoder.variant;
    header.policy = Some(PolicyMeta {
        dims: params.dims,
        hidden: hidden.to_vec(),
        policy_std: params.policy_std,
        encoder_sha256: encoder.payload_sha256.clone(),
    });
    encode(&header, &body)
}

pub fn save_policy(path: &Path, params: &IqlParams, hidden: &[usize], encoder: &CheckpointHeader, seed: u64) -> Result<(), CheckpointError> {
    fs::write(path, policy_bytes(params, hidden, encoder, seed)).map_err(io_err(path))
}

pub fn load_policy(path: &Path) -> Result<(CheckpointHeader, IqlParams), CheckpointError> {
    let (header, tensors) = read(path, CheckpointKind::Policy)?;
    let meta = header
        .policy
        .clone()
        .ok_or_else(|| CheckpointError::Header("policy checkpoint without policy metadata".into()))?;
    let mut params = IqlParams::new(meta.dims, &meta.hidden, meta.policy_std, 0);
    params.set_tensors(tensors)?;
    Ok((header, params))
}
