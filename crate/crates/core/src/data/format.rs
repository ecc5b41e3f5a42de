//! `AFAP` dataset files.
//!
//! ```text
//! "AFAP" | version u32 = 1 | H u32 | W u32 | C u32 | A u32 | count u32
//! per sequence: T u32 | T·C·H·W f32 (t, channel, row, column) | T·A f32
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"AFAP";
pub const DATASET_VERSION: u32 = 1;

/// Little-endian cursor that reports the byte offset of every failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated: {what} needs {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// `n` floats; checks the byte budget before allocating.
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset(), format!("{what}: element count overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(0, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(magic).unwrap())));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, version: u32) -> Result<()> {
        let at = self.offset();
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::format(at, format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(self.offset(), format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    for (v, what) in [(ds.height, "height"), (ds.width, "width"), (ds.channels, "channels"), (ds.action_dim, "action_dim")] {
        put_u32(&mut out, u32_of(v, what)?);
    }
    put_u32(&mut out, u32_of(ds.sequences.len(), "sequence count")?);
    for s in &ds.sequences {
        put_u32(&mut out, u32_of(s.len(), "sequence length")?);
        for f in &s.frames {
            put_f32s(&mut out, f.data());
        }
        for a in &s.actions {
            put_f32s(&mut out, a);
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    r.expect_version(DATASET_VERSION)?;
    let mut dims = [0usize; 4];
    for (d, what) in dims.iter_mut().zip(["height", "width", "channels", "action_dim"]) {
        let at = r.offset();
        *d = r.u32(what)? as usize;
        if *d == 0 {
            return Err(Error::format(at, format!("{what} must be positive")));
        }
    }
    let [h, w, c, a] = dims;
    let frame_len = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::format(r.offset(), "frame size overflows"))?;
    let count = r.u32("sequence count")? as usize;
    let mut sequences = Vec::new();
    for i in 0..count {
        let at = r.offset();
        let t = r.u32("sequence length")? as usize;
        if t == 0 {
            return Err(Error::format(at, format!("sequence {i} is empty")));
        }
        let frames_at = r.offset();
        let frames = r.f32s(t.saturating_mul(frame_len), "frames")?;
        let actions_at = r.offset();
        let actions = r.f32s(t.saturating_mul(a), "actions")?;
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(frames_at, format!("sequence {i}: non-finite frame value")));
        }
        if actions.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(actions_at, format!("sequence {i}: non-finite action value")));
        }
        sequences.push(Sequence {
            frames: frames.chunks(frame_len).map(|f| Tensor::new(&[c, h, w], f.to_vec()).expect("sized chunk")).collect(),
            actions: actions.chunks(a).map(<[f32]>::to_vec).collect(),
        });
    }
    r.finish()?;
    Ok(Dataset { height: h, width: w, channels: c, action_dim: a, sequences })
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
