//! `ALF1` bitstreams.
//!
//! ```text
//! magic "ALF1" | version u16 | C, H, W as u16 | model hash [u8; 8]
//! | payload length u32 | payload
//! ```
//!
//! All integers are little-endian. The payload is the range-coded symbols
//! followed by a CRC-32 of the symbol indices, which turns any corruption the
//! range decoder cannot see into a hard error.

use crate::codec::entropy::{ChannelGaussians, SYMBOL_MAX, SYMBOL_MIN};
use crate::codec::range::{range_decode, range_encode};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ALF1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 6 + 8 + 4;
const CRC_LEN: usize = 4;

/// Integer symbols of one latent, `[C, H, W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub shape: [usize; 3],
    pub symbols: Vec<i32>,
}

impl LatentCode {
    pub fn new(shape: [usize; 3], symbols: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != symbols.len() {
            return Err(Error::shape(format!(
                "latent shape {shape:?} does not hold {} symbols",
                symbols.len()
            )));
        }
        if shape.iter().any(|&d| d > u16::MAX as usize) {
            return Err(Error::shape(format!("latent shape {shape:?} exceeds u16 header fields")));
        }
        Ok(LatentCode { shape, symbols })
    }

    /// Clamp into the codable range, logging how many symbols moved.
    pub fn clamp_to_support(&mut self) -> usize {
        let mut clamped = 0;
        for s in &mut self.symbols {
            let c = (*s).clamp(SYMBOL_MIN, SYMBOL_MAX);
            if c != *s {
                clamped += 1;
                *s = c;
            }
        }
        if clamped > 0 {
            log::warn!(
                "{clamped} latent symbols fell outside [{SYMBOL_MIN}, {SYMBOL_MAX}] and were clamped"
            );
        }
        clamped
    }

    fn indices(&self) -> Result<Vec<usize>> {
        self.symbols
            .iter()
            .map(|&s| {
                if (SYMBOL_MIN..=SYMBOL_MAX).contains(&s) {
                    Ok((s - SYMBOL_MIN) as usize)
                } else {
                    Err(Error::Domain(format!("symbol {s} outside the codable range")))
                }
            })
            .collect()
    }
}

fn symbol_crc(indices: &[usize]) -> u32 {
    let bytes: Vec<u8> = indices.iter().map(|&i| i as u8).collect();
    crc32fast::hash(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub latent_shape: [u16; 3],
    pub model_hash: [u8; 8],
    pub payload: Vec<u8>,
}

impl Bitstream {
    /// Range-code `code` with the per-channel tables of `model`.
    pub fn encode(code: &LatentCode, model: &ChannelGaussians, model_hash: [u8; 8]) -> Result<Self> {
        if model.channels() != code.shape[0] {
            return Err(Error::shape(format!(
                "latent has {} channels, entropy model {}",
                code.shape[0],
                model.channels()
            )));
        }
        let tables = model.tables()?;
        let per = code.shape[1] * code.shape[2];
        let indices = code.indices()?;
        let mut payload = range_encode(&indices, &tables, |i| i / per.max(1))?;
        payload.extend_from_slice(&symbol_crc(&indices).to_le_bytes());
        Ok(Bitstream {
            latent_shape: code.shape.map(|d| d as u16),
            model_hash,
            payload,
        })
    }

    pub fn decode(&self, model: &ChannelGaussians, model_hash: [u8; 8]) -> Result<LatentCode> {
        if self.model_hash != model_hash {
            return Err(Error::HashMismatch {
                expected: hex(&self.model_hash),
                actual: hex(&model_hash),
            });
        }
        let shape = self.latent_shape.map(usize::from);
        if model.channels() != shape[0] {
            return Err(Error::shape(format!(
                "stream has {} channels, entropy model {}",
                shape[0],
                model.channels()
            )));
        }
        if self.payload.len() < CRC_LEN {
            return Err(Error::Corrupt("payload shorter than its checksum".into()));
        }
        let (coded, crc) = self.payload.split_at(self.payload.len() - CRC_LEN);
        let tables = model.tables()?;
        let per = shape[1] * shape[2];
        let count = shape.iter().product();
        let indices = range_decode(coded, &tables, count, |i| i / per.max(1))?;
        if symbol_crc(&indices).to_le_bytes() != crc {
            return Err(Error::Corrupt("symbol checksum mismatch".into()));
        }
        let symbols = indices.into_iter().map(|i| i as i32 + SYMBOL_MIN).collect();
        LatentCode::new(shape, symbols)
    }

    pub fn payload_bits(&self) -> usize {
        8 * self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.latent_shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("bitstream of {} bytes has no full header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not an ALF1 bitstream".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {version}")));
        }
        let latent_shape = [u16_at(6), u16_at(8), u16_at(10)];
        let model_hash: [u8; 8] = bytes[12..20].try_into().expect("8 bytes");
        let len = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(Error::Format(format!(
                "header announces {len} payload bytes, found {}",
                payload.len()
            )));
        }
        Ok(Bitstream {
            latent_shape,
            model_hash,
            payload: payload.to_vec(),
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
