//! The RASW weight format.
//!
//! All integers are little-endian.
//!
//! ```text
//! "RASW"  u32 version (1)
//! u32 spec length, spec as JSON
//! u32 tensor count, then per tensor:
//!   u16 name length, UTF-8 name
//!   u8 rank (4 for kernels, 1 for biases), rank x u32 dims
//!   u8 dtype (0 = f32, 1 = f64), raw data
//! ```
//!
//! Tensors appear in the model's parameter order, so a file written from a
//! model decodes back to identical bytes.

use std::path::Path;

use ras_core::network::ParamKind;
use ras_core::{Model, NetworkSpec, Real, Shape, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RASW";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = serde_json::to_vec(model.spec()).expect("spec serializes");
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let s = p.tensor.shape();
        let dims: &[usize] = match p.kind {
            ParamKind::Weight => &[s.n, s.c, s.h, s.w],
            ParamKind::Bias => &[s.n],
        };
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE);
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<V>(&self, msg: impl Into<String>) -> Result<V> {
        Err(Error::Weights {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Spec and element type recorded in a weight file, read without decoding
/// the tensors.
pub fn peek(bytes: &[u8]) -> Result<(NetworkSpec, u8)> {
    let mut r = Reader { bytes, pos: 0 };
    let spec = read_preamble(&mut r)?;
    let count = r.u32("tensor count")?;
    if count == 0 {
        return r.fail("file holds no tensors");
    }
    let len = r.u16("name length")? as usize;
    r.take(len, "tensor name")?;
    let rank = r.u8("rank")? as usize;
    r.take(4 * rank, "dims")?;
    let dtype = r.u8("dtype")?;
    Ok((spec, dtype))
}

fn read_preamble(r: &mut Reader) -> Result<NetworkSpec> {
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("not a RASW file (bad magic)");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let len = r.u32("spec length")? as usize;
    let start = r.pos;
    let json = r.take(len, "spec")?;
    serde_json::from_slice(json).map_err(|e| Error::Weights {
        offset: start,
        msg: format!("spec JSON: {e}"),
    })
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let spec = read_preamble(&mut r)?;
    let count = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Weights {
                offset: at + 2,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = r.u8("rank")?;
        let mut dims = [1usize; 4];
        match rank {
            1 | 4 => {
                for d in dims.iter_mut().take(rank as usize) {
                    *d = r.u32("dims")? as usize;
                }
            }
            _ => {
                r.pos -= 1;
                return r.fail(format!("{name}: rank {rank} is neither 1 nor 4"));
            }
        }
        let dtype = r.u8("dtype")?;
        if dtype != T::DTYPE {
            r.pos -= 1;
            return r.fail(format!("{name}: dtype {dtype}, expected {}", T::DTYPE));
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let Some(size) = shape.len().checked_mul(T::BYTES) else {
            return r.fail(format!("{name}: shape {shape} is too large"));
        };
        let raw = r.take(size, &name)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Model::from_params(spec, named).map_err(|e| Error::Weights {
        offset: r.pos,
        msg: e.to_string(),
    })
}

pub fn save<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(Error::io(path))
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    decode(&std::fs::read(path).map_err(Error::io(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        let mut spec = NetworkSpec::toy();
        spec.stage_channels = [2, 3, 3, 3, 3];
        spec.global_channels = 2;
        spec.side_channels = 2;
        spec
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let model = Model::<f64>::randomized(tiny(), 3).unwrap();
        let bytes = encode(&model);
        let back = decode::<f64>(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.spec(), model.spec());
        let f32_bytes = encode(&model.cast::<f32>());
        assert_eq!(encode(&decode::<f32>(&f32_bytes).unwrap()), f32_bytes);
    }

    #[test]
    fn peek_reports_dtype() {
        let model = Model::<f32>::new(tiny(), 0).unwrap();
        let (spec, dtype) = peek(&encode(&model)).unwrap();
        assert_eq!((spec, dtype), (tiny(), 0));
    }

    fn offset_of(err: Error) -> usize {
        match err {
            Error::Weights { offset, .. } => offset,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn errors_carry_offsets() {
        let model = Model::<f64>::new(tiny(), 0).unwrap();
        let bytes = encode(&model);
        assert_eq!(offset_of(decode::<f64>(b"RASX\x01\0\0\0").unwrap_err()), 0);
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert_eq!(offset_of(decode::<f64>(&v2).unwrap_err()), 4);
        assert!(decode::<f32>(&bytes).unwrap_err().to_string().contains("dtype 1"));
        let truncated = &bytes[..bytes.len() - 3];
        let err = decode::<f64>(truncated).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert_eq!(offset_of(decode::<f64>(&trailing).unwrap_err()), bytes.len());
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let model = Model::<f64>::new(tiny(), 0).unwrap();
        let mut other = tiny();
        other.side_channels = 3;
        let mut bytes = encode(&model);
        let json = serde_json::to_vec(&other).unwrap();
        let old_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        bytes.splice(8..12 + old_len, [(json.len() as u32).to_le_bytes().to_vec(), json].concat());
        assert!(decode::<f64>(&bytes).is_err());
    }
}
