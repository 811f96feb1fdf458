//! Binary container shared by checkpoints and adversarial batch files:
//! an 8-byte magic, little-endian `u64` header length (bytes) and payload
//! length (values), the JSON header, a payload of little-endian `f64` blocks
//! addressed by the header, and a SHA-256 of everything before it.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pmdef_core::Tensor;

use crate::error::{Error, Result};

const PREFIX: usize = 24;
const DIGEST: usize = 32;

/// Location of one tensor in the payload, in `f64` units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl BlockRef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Accumulates payload blocks while the header is being built.
#[derive(Default)]
pub struct PayloadWriter {
    data: Vec<f64>,
}

impl PayloadWriter {
    pub fn push(&mut self, t: &Tensor) -> BlockRef {
        let r = BlockRef {
            shape: t.shape().to_vec(),
            offset: self.data.len(),
        };
        self.data.extend_from_slice(t.data());
        r
    }

    pub fn finish<H: Serialize>(self, magic: &[u8; 8], header: &H) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(header)?;
        let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * self.data.len() + DIGEST);
        out.extend_from_slice(magic);
        out.extend((json.len() as u64).to_le_bytes());
        out.extend((self.data.len() as u64).to_le_bytes());
        out.extend(json);
        for v in self.data {
            out.extend(v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }
}

/// Decoded payload; hands out tensors by [`BlockRef`].
pub struct Payload {
    what: String,
    data: Vec<f64>,
    used: usize,
}

impl Payload {
    pub fn tensor(&mut self, r: &BlockRef) -> Result<Tensor> {
        let end = r.offset.checked_add(r.len()).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(Error::Format {
                what: self.what.clone(),
                reason: format!("block at {} of {} values exceeds the payload of {}", r.offset, r.len(), self.data.len()),
            });
        };
        self.used += r.len();
        Ok(Tensor::new(r.shape.clone(), self.data[r.offset..end].to_vec())?)
    }

    /// Fails when the payload holds values no block referenced.
    pub fn finish(self) -> Result<()> {
        if self.used != self.data.len() {
            return Err(Error::Format {
                what: self.what,
                reason: format!("payload holds {} values but the header references {}", self.data.len(), self.used),
            });
        }
        Ok(())
    }
}

fn le_u64(b: &[u8]) -> usize {
    usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes"))).unwrap_or(usize::MAX)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 8], what: &str) -> Result<(H, Payload)> {
    let truncated = |needed: usize| Error::Truncated {
        what: what.into(),
        offset: bytes.len(),
        needed,
    };
    if bytes.len() < 8 {
        return Err(truncated(8 - bytes.len()));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic {
            what: what.into(),
            expected: u64::from_be_bytes(*magic),
            found: u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes")),
        });
    }
    if bytes.len() < PREFIX {
        return Err(truncated(PREFIX - bytes.len()));
    }
    let hlen = le_u64(&bytes[8..16]);
    let plen = le_u64(&bytes[16..24]);
    let total = plen
        .checked_mul(8)
        .and_then(|p| p.checked_add(hlen))
        .and_then(|t| t.checked_add(PREFIX + DIGEST))
        .ok_or_else(|| Error::Format {
            what: what.into(),
            reason: "section lengths overflow".into(),
        })?;
    if bytes.len() < total {
        return Err(truncated(total - bytes.len()));
    }
    if bytes.len() > total {
        return Err(Error::Format {
            what: what.into(),
            reason: format!("{} trailing bytes", bytes.len() - total),
        });
    }
    let header = serde_json::from_slice(&bytes[PREFIX..PREFIX + hlen]).map_err(|source| Error::HeaderJson {
        what: what.into(),
        source,
    })?;
    let body_end = total - DIGEST;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(Error::Checksum { what: what.into() });
    }
    let data = bytes[PREFIX + hlen..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((
        header,
        Payload {
            what: what.into(),
            data,
            used: 0,
        },
    ))
}
