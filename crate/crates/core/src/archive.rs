//! Binary transition-matrix archive: little-endian f64 payload with an input
//! hash (for cache checks) and a trailing content hash.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::propagator::TransitionMatrixPair;
use crate::pulses::PulseLibrary;

pub const MAGIC: &[u8; 5] = b"QLSTM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionArchive {
    /// Hash of everything the matrices were computed from.
    pub input_hash: [u8; 32],
    pub library: PulseLibrary,
    pub pairs: Vec<TransitionMatrixPair>,
}

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn corrupt(msg: &str) -> Error {
    Error::data(format!("transition archive: {msg}"))
}

impl TransitionArchive {
    pub fn n_states(&self) -> usize {
        self.pairs.first().map(|p| p.n_states()).unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
        buf.extend_from_slice(&self.input_hash);
        let lib = self.library.to_json()?;
        buf.write_u64::<LittleEndian>(lib.len() as u64).expect("vec write");
        buf.extend_from_slice(lib.as_bytes());
        let n = self.n_states();
        buf.write_u64::<LittleEndian>(n as u64).expect("vec write");
        buf.write_u64::<LittleEndian>(self.pairs.len() as u64).expect("vec write");
        for p in &self.pairs {
            if p.n_states() != n {
                return Err(Error::data("archive pairs differ in dimension"));
            }
            buf.write_u64::<LittleEndian>(p.pulse_id as u64).expect("vec write");
            for m in [&p.a0, &p.a1] {
                for &x in m.iter() {
                    buf.write_f64::<LittleEndian>(x).expect("vec write");
                }
            }
        }
        let digest = sha256(&[&buf]);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if sha256(&[body]) != digest {
            return Err(corrupt("content hash mismatch"));
        }
        let mut r = Cursor::new(body);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated"))?;
        if version != VERSION {
            return Err(Error::config(format!("unsupported archive version {version}")));
        }
        let mut input_hash = [0u8; 32];
        r.read_exact(&mut input_hash).map_err(|_| corrupt("truncated"))?;
        let read_u64 = |r: &mut Cursor<&[u8]>| r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated"));
        let lib_len = read_u64(&mut r)? as usize;
        let mut lib = vec![0u8; lib_len.min(body.len())];
        r.read_exact(&mut lib).map_err(|_| corrupt("truncated"))?;
        let library = PulseLibrary::from_json(std::str::from_utf8(&lib).map_err(|_| corrupt("library is not UTF-8"))?)?;
        let n = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let expected = count
            .checked_mul(8 + 16 * n * n)
            .ok_or_else(|| corrupt("dimension overflow"))?;
        if body.len() - r.position() as usize != expected {
            return Err(corrupt("payload size does not match header"));
        }
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let pulse_id = read_u64(&mut r)? as usize;
            let mut mats = Vec::with_capacity(2);
            for _ in 0..2 {
                let mut data = vec![0.0; n * n];
                r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| corrupt("truncated"))?;
                mats.push(DMatrix::from_vec(n, n, data));
            }
            let a1 = mats.pop().expect("two matrices");
            let a0 = mats.pop().expect("two matrices");
            pairs.push(TransitionMatrixPair { a0, a1, pulse_id });
        }
        if pairs.len() != library.len() {
            return Err(corrupt("pulse count differs from the stored library"));
        }
        Ok(TransitionArchive {
            input_hash,
            library,
            pairs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        TransitionArchive::from_bytes(&bytes)
    }

    /// Input hash of an archive on disk, if it is intact.
    pub fn peek_input_hash(path: &Path) -> Option<[u8; 32]> {
        TransitionArchive::read(path).ok().map(|a| a.input_hash)
    }

    pub fn audit(&self, tolerance: f64) -> Result<()> {
        for p in &self.pairs {
            let err = p.column_sum_error();
            if !(err <= tolerance) {
                return Err(Error::numerical(format!(
                    "pulse {}: column sums off by {err:e}",
                    p.pulse_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulses::{
        DrivenTransition, PulseSpec, Sideband, StokesPolarization, TrapConfig, LIBRARY_FORMAT_VERSION,
    };

    fn sample() -> TransitionArchive {
        let pulse = |id| PulseSpec {
            id,
            transitions: vec![DrivenTransition {
                initial: 0,
                final_: id,
                rabi_rate: 1.0,
                frequency_hz: 1e3 * id as f64,
            }],
            laser_frequency_hz: 1e3 * id as f64,
            rabi_rate: 1.0,
            duration_s: 1e-3,
            sideband: Sideband::Blue,
            polarization: StokesPolarization::SigmaMinus,
        };
        let library = PulseLibrary {
            version: LIBRARY_FORMAT_VERSION,
            trap: TrapConfig::default(),
            pulses: vec![pulse(1), pulse(2)],
            couplings: vec![],
            sideband: Sideband::Blue,
        };
        let mut a = TransitionMatrixPair::identity(3, 1);
        a.a0[(0, 0)] = 0.25;
        a.a1[(2, 0)] = 0.75;
        TransitionArchive {
            input_hash: sha256(&[b"inputs"]),
            library,
            pairs: vec![a, TransitionMatrixPair::identity(3, 2)],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..5], MAGIC);
        assert_eq!(TransitionArchive::from_bytes(&bytes).unwrap(), a);
        a.audit(1e-12).unwrap();
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(TransitionArchive::from_bytes(&bytes).is_err());
        assert!(TransitionArchive::from_bytes(&bytes[..10]).is_err());
    }
}
