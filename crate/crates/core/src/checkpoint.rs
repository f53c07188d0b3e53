//! Versioned network checkpoints: config, seed, epoch, and named parameter
//! tensors as row-major float32, all little-endian. Byte-stable across
//! platforms, so identical training runs produce identical files.

use crate::error::{Error, Result};
use crate::unet::{build_network, Network, NetworkConfig};
use byteorder::{ByteOrder, LittleEndian};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SEGCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub seed: u64,
    pub epoch: u32,
    pub net: Network<f32>,
}

pub fn encode(net: &Network<f32>, seed: u64, epoch: u32) -> Vec<u8> {
    let config_json = serde_json::to_vec(&net.config).expect("config serializes");
    let params = net.named_parameters();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut u32buf = [0u8; 4];
    let mut push_u32 = |out: &mut Vec<u8>, v: u32| {
        LittleEndian::write_u32(&mut u32buf, v);
        out.extend_from_slice(&u32buf);
    };
    push_u32(&mut out, VERSION);
    push_u32(&mut out, config_json.len() as u32);
    out.extend_from_slice(&config_json);
    let mut u64buf = [0u8; 8];
    LittleEndian::write_u64(&mut u64buf, seed);
    out.extend_from_slice(&u64buf);
    push_u32(&mut out, epoch);
    push_u32(&mut out, params.len() as u32);
    for (name, tensor) in params {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, tensor.shape.len() as u32);
        for &d in &tensor.shape {
            push_u32(&mut out, d as u32);
        }
        let mut buf = vec![0u8; tensor.data.len() * 4];
        LittleEndian::write_f32_into(&tensor.data, &mut buf);
        out.extend_from_slice(&buf);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadCheckpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!("unknown version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let seed = r.u64()?;
    let epoch = r.u32()?;
    let n_tensors = r.u32()? as usize;

    let mut net: Network<f32> = build_network(&config, 0)?;
    let mut filled = 0usize;
    let expected = net.named_parameters().len();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::BadCheckpoint("non-utf8 tensor name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let mut data = vec![0f32; numel];
        LittleEndian::read_f32_into(raw, &mut data);

        let mut params = net.named_parameters_mut();
        let slot = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::BadCheckpoint(format!("unknown tensor {name}")))?;
        if slot.shape != shape {
            return Err(Error::BadCheckpoint(format!(
                "tensor {name}: shape {shape:?}, expected {:?}",
                slot.shape
            )));
        }
        slot.data = data;
        filled += 1;
    }
    if filled != expected {
        return Err(Error::BadCheckpoint(format!(
            "checkpoint holds {filled} tensors, network needs {expected}"
        )));
    }
    if !net.all_finite() {
        return Err(Error::BadCheckpoint("non-finite parameter".into()));
    }
    Ok(Checkpoint { config, seed, epoch, net })
}

pub fn save(path: impl AsRef<Path>, net: &Network<f32>, seed: u64, epoch: u32) -> Result<()> {
    std::fs::write(path, encode(net, seed, epoch))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| {
        Error::MissingArtifact(format!("checkpoint {}: {e}", path.display()))
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_roundtrip_preserves_everything() {
        let cfg = NetworkConfig::new(4, 5, true);
        let net: Network<f32> = build_network(&cfg, 77).unwrap();
        let bytes = encode(&net, 77, 42);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.seed, 77);
        assert_eq!(ck.epoch, 42);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.net, net);
    }

    #[test]
    fn test_encoding_is_deterministic() {
        let net: Network<f32> = build_network(&NetworkConfig::new(2, 3, false), 5).unwrap();
        assert_eq!(encode(&net, 5, 0), encode(&net, 5, 0));
    }

    #[test]
    fn test_truncated_checkpoint_rejected() {
        let net: Network<f32> = build_network(&NetworkConfig::new(2, 3, false), 5).unwrap();
        let bytes = encode(&net, 5, 0);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 10]),
            Err(Error::BadCheckpoint(_))
        ));
    }

    #[test]
    fn test_wrong_magic_rejected() {
        let net: Network<f32> = build_network(&NetworkConfig::new(2, 3, false), 5).unwrap();
        let mut bytes = encode(&net, 5, 0);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadCheckpoint(_))));
    }
}
