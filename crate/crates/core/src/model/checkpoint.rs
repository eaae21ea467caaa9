//! Binary checkpoint files.
//!
//! Layout: the magic bytes `LUNET1\n`, one line of JSON with the header
//! fields, then for each layer in order the packed `U`, the packed strict
//! lower `L` and the bias, all as little-endian `f64` with no padding.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LuLayer, LuNet, ModelError};
use crate::activation::{ActivationKind, DEFAULT_ALPHA};
use crate::linalg::{packed_lower_len, packed_upper_len, UnitLowerTriangular, UpperTriangular};

pub const MAGIC: &[u8] = b"LUNET1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("layers use different leaky softplus slopes")]
    MixedAlpha,
    #[error("invalid network: {0}")]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    #[serde(rename = "M")]
    pub layers: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub init_seed: u64,
    pub activations: Vec<String>,
}

/// A network together with the training metadata stored next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: LuNet,
    pub gamma: f64,
    pub init_seed: u64,
}

fn activation_name(kind: &ActivationKind) -> &'static str {
    match kind {
        ActivationKind::LeakySoftplus { .. } => "leaky_softplus",
        ActivationKind::Identity => "identity",
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let net = &ckpt.net;
    let mut alpha = None;
    for layer in net.layers() {
        if let ActivationKind::LeakySoftplus { alpha: a } = layer.activation {
            match alpha {
                None => alpha = Some(a),
                Some(prev) if prev.to_bits() != a.to_bits() => return Err(CheckpointError::MixedAlpha),
                Some(_) => {}
            }
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        layers: net.depth(),
        dim: net.dim(),
        alpha: alpha.unwrap_or(DEFAULT_ALPHA),
        gamma: ckpt.gamma,
        init_seed: ckpt.init_seed,
        activations: net
            .layers()
            .iter()
            .map(|l| activation_name(&l.activation).to_string())
            .collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let mut buf = Vec::with_capacity(MAGIC.len() + json.len() + 1 + 8 * net.num_parameters());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(json.as_bytes());
    buf.push(b'\n');
    for layer in net.layers() {
        for block in layer.blocks() {
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let rest = bytes.strip_prefix(MAGIC).ok_or(CheckpointError::BadMagic)?;
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::BadHeader("missing header terminator".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..newline]).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.format_version));
    }
    if header.activations.len() != header.layers {
        return Err(CheckpointError::BadHeader(format!(
            "{} activations for {} layers",
            header.activations.len(),
            header.layers
        )));
    }
    let d = header.dim;
    let upper_len = packed_upper_len(d);
    let lower_len = packed_lower_len(d);
    let per_layer = upper_len + lower_len + d;
    let payload = &rest[newline + 1..];
    let expected = header
        .layers
        .checked_mul(per_layer)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| CheckpointError::BadHeader("size overflow".into()))?;
    if payload.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(CheckpointError::TrailingBytes(payload.len() - expected));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let mut layers = Vec::with_capacity(header.layers);
    for name in &header.activations {
        let activation = match name.as_str() {
            "leaky_softplus" => ActivationKind::leaky_softplus(header.alpha)
                .map_err(|e| CheckpointError::BadHeader(e.to_string()))?,
            "identity" => ActivationKind::Identity,
            other => {
                return Err(CheckpointError::BadHeader(format!(
                    "unknown activation {other:?}"
                )))
            }
        };
        let upper = UpperTriangular::from_packed(d, take(upper_len)).expect("sized above");
        let lower = UnitLowerTriangular::from_packed(d, take(lower_len)).expect("sized above");
        let bias = take(d);
        layers.push(LuLayer {
            upper,
            lower,
            bias,
            activation,
        });
    }
    Ok(Checkpoint {
        net: LuNet::new(layers)?,
        gamma: header.gamma,
        init_seed: header.init_seed,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    parse(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_net, InitScheme};

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            net: init_net(3, 4, 9, InitScheme::Standard).unwrap(),
            gamma: 100.0,
            init_seed: 9,
        }
    }

    fn encode(ckpt: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, ckpt).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample_checkpoint();
        let bytes = encode(&ckpt);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn layout_is_magic_header_then_payload() {
        let ckpt = sample_checkpoint();
        let bytes = encode(&ckpt);
        assert!(bytes.starts_with(b"LUNET1\n{\"format_version\":1,\"M\":3,\"D\":4,"));
        let header_end = MAGIC.len() + bytes[MAGIC.len()..].iter().position(|&b| b == b'\n').unwrap() + 1;
        // 3 layers * (10 + 6 + 4) values
        assert_eq!(bytes.len() - header_end, 3 * 20 * 8);
        let first = f64::from_le_bytes(bytes[header_end..header_end + 8].try_into().unwrap());
        assert_eq!(first, ckpt.net.layers()[0].upper.packed()[0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&sample_checkpoint());
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint(bytes.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            read_checkpoint(&b"LUN"[..]),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = encode(&sample_checkpoint());
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_checkpoint(short),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            read_checkpoint(long.as_slice()),
            Err(CheckpointError::TrailingBytes(1))
        ));
    }
}
