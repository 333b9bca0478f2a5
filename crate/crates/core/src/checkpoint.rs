//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"AUPT"
//! version u32 (= 1)
//! n_tensors u32
//! tensor entry * n_tensors:
//!     name_len u16, name utf-8,
//!     ndims u8, dims u32 * ndims,
//!     payload f32-LE * product(dims)
//! metadata: config_hash (u16 len + utf-8), seed u64, epoch u32
//! optimizer flag u8 (0|1); if 1:
//!     step_count u64, per parameter: m payload then v payload (f32-LE,
//!     same length as the parameter)
//! ```
//!
//! Tensor entries appear in network layer order with the output head last,
//! so checkpoints differing only in the head also differ only in a suffix of
//! the tensor section (plus metadata). Payloads are 32-bit floats regardless
//! of the in-memory scalar type; save/load round-trips f32 networks
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::optim::AdamState;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"AUPT";
const VERSION: u32 = 1;

/// Run provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: u32,
}

/// Optimizer accumulators as stored on disk.
pub struct OptimSnapshot {
    pub step_count: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

pub struct LoadedCheckpoint<T: Scalar> {
    pub network: Network<T>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimSnapshot>,
}

pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamState<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let params = net.named_parameters();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let dims = tensor.dims();
        w.write_all(&[dims.len() as u8])?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        tensor.with_data(|data| -> Result<()> {
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            w.write_all(&bytes)?;
            Ok(())
        })?;
    }

    let hash_bytes = meta.config_hash.as_bytes();
    w.write_all(&(hash_bytes.len() as u16).to_le_bytes())?;
    w.write_all(hash_bytes)?;
    w.write_all(&meta.seed.to_le_bytes())?;
    w.write_all(&meta.epoch.to_le_bytes())?;

    match optimizer {
        None => w.write_all(&[0u8])?,
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.step_count().to_le_bytes())?;
            let (m, v) = state.moments();
            for (mi, vi) in m.iter().zip(v.iter()) {
                for x in mi {
                    w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
                }
                for x in vi {
                    w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

// Reader that tracks its byte offset so format errors can carry a position.
struct TrackedReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> TrackedReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                message: "unexpected end of file".into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        let start = self.offset;
        self.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::Format {
            offset: start,
            message: "invalid utf-8 in string field".into(),
        })
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<LoadedCheckpoint<T>> {
    let mut r = TrackedReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected {MAGIC:?}") });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }

    let n_tensors = r.u32()? as usize;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let ndims = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.f32_vec(numel)?;
        entries.push((name, dims, payload));
    }

    let config_hash = r.string()?;
    let seed = r.u64()?;
    let epoch = r.u32()?;
    let meta = CheckpointMeta { config_hash, seed, epoch };

    // Reconstruct topology from the stored head/stem shapes, then overwrite
    // every parameter; entry names and dims must match the rebuilt network.
    let in_channels = entries
        .iter()
        .find(|(n, _, _)| n == "conv1-1.weight")
        .and_then(|(_, dims, _)| dims.get(1).copied())
        .ok_or_else(|| Error::Format { offset: r.offset, message: "missing conv1-1.weight entry".into() })?;
    let num_outputs = entries
        .iter()
        .find(|(n, _, _)| n == "output.weight")
        .and_then(|(_, dims, _)| dims.first().copied())
        .ok_or_else(|| Error::Format { offset: r.offset, message: "missing output.weight entry".into() })?;

    let network = crate::network::build_vgg13::<T>(in_channels, num_outputs, seed)?;
    let expected = network.named_parameters();
    if expected.len() != entries.len() {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("{} tensor entries, expected {}", entries.len(), expected.len()),
        });
    }
    for ((name, dims, payload), (want_name, param)) in entries.iter().zip(expected) {
        if name != want_name || *dims != param.dims() {
            return Err(Error::Format {
                offset: r.offset,
                message: format!("entry {name} {dims:?} does not match expected {want_name} {:?}", param.dims()),
            });
        }
        let values: Vec<T> = payload.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        param.set_data(&values)?;
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step_count = r.u64()?;
            let mut m = Vec::with_capacity(entries.len());
            let mut v = Vec::with_capacity(entries.len());
            for (_, dims, _) in &entries {
                let numel: usize = dims.iter().product();
                m.push(r.f32_vec(numel)?);
                v.push(r.f32_vec(numel)?);
            }
            Some(OptimSnapshot { step_count, m, v })
        }
        flag => {
            return Err(Error::Format {
                offset: r.offset - 1,
                message: format!("invalid optimizer flag {flag}"),
            })
        }
    };

    Ok(LoadedCheckpoint { network, meta, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_vgg13;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("aupt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.aupt");

        let net = build_vgg13::<f32>(1, 17, 7).unwrap();
        let meta = CheckpointMeta { config_hash: "deadbeef".into(), seed: 7, epoch: 3 };
        save_checkpoint(&net, &meta, None, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();

        assert_eq!(loaded.meta, meta);
        assert!(loaded.optimizer.is_none());
        for ((n1, p1), (n2, p2)) in net.named_parameters().iter().zip(loaded.network.named_parameters()) {
            assert_eq!(n1, n2);
            let (a, b) = (p1.to_vec(), p2.to_vec());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{n1} not bit-exact");
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = std::env::temp_dir().join("aupt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truncated.aupt");

        let net = build_vgg13::<f32>(1, 12, 1).unwrap();
        save_checkpoint(&net, &CheckpointMeta::default(), None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();

        match load_checkpoint::<f32>(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            Err(other) => panic!("expected format error, got {other:?}"),
            Ok(_) => panic!("expected format error, got a network"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_is_format_error_at_zero() {
        let dir = std::env::temp_dir().join("aupt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badmagic.aupt");
        std::fs::write(&path, b"NOPE----------------").unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            Err(other) => panic!("expected format error at 0, got {other:?}"),
            Ok(_) => panic!("expected format error, got a network"),
        }
        std::fs::remove_file(&path).unwrap();
    }
}
