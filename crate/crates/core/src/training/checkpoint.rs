//! `AFAC` checkpoint files.
//!
//! ```text
//! "AFAC" | version u32 = 1 | config length u32 | config key=value text (UTF-8)
//! tensor count u32
//! per tensor: name length u16 | name (UTF-8) | rank u8 | dims u32 × rank | f32 values
//! ```
//! All integers and floats little-endian. Tensors appear in parameter
//! visiting order.

use std::fs;
use std::path::Path;

use crate::cells::ParamTree;
use crate::data::format::{put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig, Parameters};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFAC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model: configuration plus weights.
pub type Checkpoint = Network<f32>;

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = ck.config.to_kv();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    let named = ck.params.named();
    put_u32(&mut out, named.len() as u32);
    for (name, t) in named {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    r.expect_version(CHECKPOINT_VERSION)?;
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| Error::format(at, "config text is not UTF-8"))?;
    let config = NetworkConfig::from_kv(text).map_err(|e| Error::format(at, format!("embedded config: {e}")))?;
    config.validate().map_err(|e| Error::format(at, format!("embedded config: {e}")))?;

    let mut params = Parameters::<Tensor<f32>>::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count_at = r.offset();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::format(count_at, format!("{count} tensors, config requires {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let at = r.offset();
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?).map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
        if name != want_name {
            return Err(Error::format(at, format!("tensor {name:?} where {want_name:?} was expected")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if &shape != want_shape {
            return Err(Error::format(at, format!("tensor {name} has shape {shape:?}, config requires {want_shape:?}")));
        }
        let data_at = r.offset();
        let data = r.f32s(shape.iter().product(), "tensor data")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(data_at, format!("tensor {name} holds non-finite values")));
        }
        tensors.push(Tensor::new(&shape, data).map_err(|e| Error::format(at, e.to_string()))?);
    }
    r.finish()?;
    let mut it = tensors.into_iter();
    params.visit_mut("", &mut |_, t| *t = it.next().expect("counted above"));
    Network::new(config, params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists that it was built for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.config != expected {
        return Err(Error::config(format!(
            "checkpoint holds a {}-layer {}×{} model, expected {}-layer {}×{} (configs differ)",
            ck.config.layers, ck.config.height, ck.config.width, expected.layers, expected.height, expected.width
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Network::init(NetworkConfig::new(2, 8, 12, 1, 2), 4).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        for ((na, a), (nb, b)) in ck.params.named().iter().zip(back.params.named()) {
            assert_eq!(na, &nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode_checkpoint(&Network::init(NetworkConfig::new(1, 2, 2, 1, 1), 0).unwrap()).unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'P';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[12] = b'#';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.afac");
        save_checkpoint(&path, &sample()).unwrap();
        let three = NetworkConfig::new(3, 8, 12, 1, 2);
        assert!(matches!(load_checkpoint_for(&path, &three), Err(Error::Config(_))));
        assert!(load_checkpoint_for(&path, &NetworkConfig::new(2, 8, 12, 1, 2)).is_ok());
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
