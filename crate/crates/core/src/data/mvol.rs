//! MVOL: a minimal little-endian binary volume container.
//!
//! Layout: magic `MVOL`, version byte `0x01`, dtype byte (`0x01` f32,
//! `0x02` u8), three `u32` extents `X, Y, Z`, then `X*Y*Z` payload values in
//! row-major order (`z` fastest).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MVOL";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;
pub const DTYPE_U8: u8 = 0x02;
const HEADER_LEN: usize = 4 + 1 + 1 + 12;

/// Decoded MVOL payload.
#[derive(Clone, Debug, PartialEq)]
pub enum MvolData {
    Real(Vec<f32>),
    Labels(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mvol {
    pub dims: [usize; 3],
    pub data: MvolData,
}

impl Mvol {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let numel: usize = self.dims.iter().product();
        let (dtype, len) = match &self.data {
            MvolData::Real(v) => (DTYPE_F32, v.len()),
            MvolData::Labels(v) => (DTYPE_U8, v.len()),
        };
        if len != numel {
            return Err(Error::LengthMismatch {
                declared: numel,
                actual: len,
            });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + numel * 4);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(dtype);
        for d in self.dims {
            let d =
                u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            MvolData::Real(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            MvolData::Labels(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!(
                "unsupported MVOL version {}",
                bytes[4]
            )));
        }
        let dtype = bytes[5];
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_U8 => 1,
            other => {
                return Err(Error::Format(format!(
                    "unknown MVOL dtype code {other:#04x}"
                )))
            }
        };
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 6 + 4 * i;
            *d = u32::from_le_bytes(
                bytes[off..off + 4]
                    .try_into()
                    .expect("header length checked"),
            ) as usize;
        }
        let numel: usize = dims.iter().product();
        let payload = &bytes[HEADER_LEN..];
        let expected = numel * width;
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() != expected {
            return Err(Error::LengthMismatch {
                declared: numel,
                actual: payload.len() / width,
            });
        }
        let data = match dtype {
            DTYPE_F32 => MvolData::Real(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            _ => MvolData::Labels(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Mvol {
        Mvol {
            dims: [2, 2, 2],
            data: MvolData::Real((0..8).map(|i| i as f32 * 0.25 - 1.0).collect()),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"MVOL");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 0x01);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 18 + 32);
        assert_eq!(&bytes[18..22], &(-1.0f32).to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let mut bad = sample().encode().unwrap();
        bad[0] = b'X';
        assert!(matches!(Mvol::decode(&bad), Err(Error::BadMagic { .. })));

        let good = sample().encode().unwrap();
        let short = &good[..good.len() - 4];
        assert!(matches!(Mvol::decode(short), Err(Error::Truncated { .. })));

        let mut long = good.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(
            Mvol::decode(&long),
            Err(Error::LengthMismatch { .. })
        ));

        let mut dtype = good;
        dtype[5] = 0x07;
        assert!(matches!(Mvol::decode(&dtype), Err(Error::Format(_))));
    }

    #[test]
    fn label_round_trip() {
        let v = Mvol {
            dims: [1, 3, 2],
            data: MvolData::Labels(vec![0, 1, 2, 3, 4, 0]),
        };
        assert_eq!(Mvol::decode(&v.encode().unwrap()).unwrap(), v);
    }
}
