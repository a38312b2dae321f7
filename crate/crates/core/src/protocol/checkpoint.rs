//! Model checkpoint container. Shares the package wire conventions (magic,
//! version, little-endian fields, trailing CRC) under a different magic, and
//! always stores 64-bit values with learnable/frozen class tags.

use std::fs;
use std::path::Path;

use super::package::{crc32, PackageError};
use crate::netcore::{Layer, ModelSpec, ParamClass, ParamEntry, ParamStore};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMDL";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(spec: &ModelSpec, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.input.0 as u32).to_le_bytes());
    out.extend_from_slice(&(spec.input.1 as u32).to_le_bytes());
    out.extend_from_slice(&(spec.input.2 as u32).to_le_bytes());
    out.extend_from_slice(&(spec.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());
    for layer in &spec.layers {
        match *layer {
            Layer::Conv2D {
                c_in,
                c_out,
                k_h,
                k_w,
                stride,
                padding,
                has_bias,
            } => {
                out.push(0);
                for v in [c_in, c_out, k_h, k_w, stride, padding] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
                out.push(u8::from(has_bias));
            }
            Layer::Fc {
                d_in,
                d_out,
                has_bias,
            } => {
                out.push(1);
                out.extend_from_slice(&(d_in as u32).to_le_bytes());
                out.extend_from_slice(&(d_out as u32).to_le_bytes());
                out.push(u8::from(has_bias));
            }
            Layer::Relu => out.push(2),
            Layer::MaxPool2 => out.push(3),
            Layer::Flatten => out.push(4),
        }
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, entry) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match entry.class {
            ParamClass::Learnable => 0,
            ParamClass::Frozen => 1,
        });
        out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
        for &d in &entry.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(entry.data.len() as u32).to_le_bytes());
        for &v in &entry.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelSpec, ParamStore), PackageError> {
    if bytes.len() < 4 {
        return Err(PackageError::Truncated {
            need: 4,
            have: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != CHECKPOINT_MAGIC {
        return Err(PackageError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            got: magic,
        });
    }
    if bytes.len() < 8 {
        return Err(PackageError::Truncated {
            need: 8,
            have: bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(PackageError::CrcMismatch { stored, computed });
    }

    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], PackageError> {
        if *pos + n > body.len() {
            return Err(PackageError::Truncated {
                need: *pos + n,
                have: body.len(),
            });
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u8v = |pos: &mut usize| -> Result<u8, PackageError> { Ok(take(pos, 1)?[0]) };
    let u16v = |pos: &mut usize| -> Result<u16, PackageError> {
        Ok(u16::from_le_bytes(take(pos, 2)?.try_into().unwrap()))
    };
    let u32v = |pos: &mut usize| -> Result<u32, PackageError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    let version = u16v(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(PackageError::UnsupportedVersion(version));
    }
    let input = (
        u32v(&mut pos)? as usize,
        u32v(&mut pos)? as usize,
        u32v(&mut pos)? as usize,
    );
    let num_classes = u32v(&mut pos)? as usize;
    let layer_count = u32v(&mut pos)? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        let kind = u8v(&mut pos)?;
        layers.push(match kind {
            0 => {
                let mut dims = [0usize; 6];
                for d in dims.iter_mut() {
                    *d = u32v(&mut pos)? as usize;
                }
                Layer::Conv2D {
                    c_in: dims[0],
                    c_out: dims[1],
                    k_h: dims[2],
                    k_w: dims[3],
                    stride: dims[4],
                    padding: dims[5],
                    has_bias: u8v(&mut pos)? != 0,
                }
            }
            1 => Layer::Fc {
                d_in: u32v(&mut pos)? as usize,
                d_out: u32v(&mut pos)? as usize,
                has_bias: u8v(&mut pos)? != 0,
            },
            2 => Layer::Relu,
            3 => Layer::MaxPool2,
            4 => Layer::Flatten,
            other => {
                return Err(PackageError::Malformed(format!("layer kind {other}")))
            }
        });
    }
    let entry_count = u32v(&mut pos)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..entry_count {
        let name_len = u16v(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| PackageError::Malformed("non-utf8 entry name".into()))?;
        let class = match u8v(&mut pos)? {
            0 => ParamClass::Learnable,
            1 => ParamClass::Frozen,
            other => return Err(PackageError::Malformed(format!("class tag {other}"))),
        };
        let ndim = u32v(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32v(&mut pos)? as usize);
        }
        let count = u32v(&mut pos)? as usize;
        let raw = take(&mut pos, count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if shape.iter().product::<usize>() != data.len() {
            return Err(PackageError::Malformed(format!(
                "entry {name}: shape/data mismatch"
            )));
        }
        params.insert(name, ParamEntry { shape, class, data });
    }
    if pos != body.len() {
        return Err(PackageError::Malformed("trailing bytes".into()));
    }
    let spec = ModelSpec {
        input,
        num_classes,
        layers,
    };
    Ok((spec, params))
}

pub fn save_checkpoint(
    path: &Path,
    spec: &ModelSpec,
    params: &ParamStore,
) -> std::io::Result<()> {
    fs::write(path, encode_checkpoint(spec, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamStore), super::ProtocolError> {
    let bytes = fs::read(path)?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::init_params;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let spec = ModelSpec::tiny_net();
        let mut params = init_params(&spec, 3);
        params.insert(
            "aux.frozen",
            ParamEntry::new(vec![2], ParamClass::Frozen, vec![1.5, -2.5]),
        );
        let bytes = encode_checkpoint(&spec, &params);
        let (spec2, params2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(params2.canonical_bytes(), params.canonical_bytes());
        assert_eq!(encode_checkpoint(&spec2, &params2), bytes);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let spec = ModelSpec::tiny_net();
        let params = init_params(&spec, 3);
        let mut bytes = encode_checkpoint(&spec, &params);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(
            decode_checkpoint(&bytes).unwrap_err(),
            PackageError::CrcMismatch { .. }
        ));
    }

    #[test]
    fn package_magic_is_not_a_checkpoint() {
        let bytes = b"DLTA\x01\x00rest";
        assert!(matches!(
            decode_checkpoint(bytes).unwrap_err(),
            PackageError::BadMagic { .. }
        ));
    }
}
