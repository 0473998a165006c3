//! Binary feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DRXF"  u16 version  u32 tensor_count
//! per tensor: u16 name_len, name bytes, u8 dtype (0 = f32), u8 rank,
//!             u32 extent * rank, f32 payload (row-major)
//! u32 CRC-32 of every byte after the version field
//! ```
//!
//! A bundle is stored as the tensors `appearance`, `motion`, `question`,
//! `answer0`..`answer3` and `label` (shape `[1]`).

use std::path::Path;

use super::binary::{check_header, check_trailer, put_trailer, put_u16, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::pipeline::{FeatureBundle, CANDIDATES};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DRXF";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes named tensors. Values are narrowed to f32.
pub fn encode_tensors(tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, VERSION);
    let start = out.len();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument {
            op: "encode_tensors",
            msg: format!("name `{name}` is too long"),
        })?;
        put_u16(&mut out, name_len);
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    put_trailer(&mut out, start);
    Ok(out)
}

/// Parses a feature file. Magic and version are checked before any record,
/// and no tensor is returned unless the checksum matches.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC, VERSION)?;
    let start = r.pos();
    let count = r.u32()? as usize;
    let mut raw = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(FormatError::Malformed(format!("unknown dtype {dtype} for `{name}`")));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::Malformed(format!("extents of `{name}` overflow")))?;
        let payload = r.take(n)?;
        raw.push((name, shape, payload));
    }
    check_trailer(&mut r, bytes, start)?;
    raw.into_iter()
        .map(|(name, shape, payload)| {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(format!("`{name}`: {e}")))?;
            Ok((name, t))
        })
        .collect()
}

pub fn encode_features(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    let label = Tensor::new(vec![1], vec![bundle.label as f64])?;
    let names = ["answer0", "answer1", "answer2", "answer3"];
    let mut list: Vec<(&str, &Tensor)> = vec![
        ("appearance", &bundle.appearance),
        ("motion", &bundle.motion),
        ("question", &bundle.question),
    ];
    list.extend(names.iter().copied().zip(bundle.answers.iter()));
    list.push(("label", &label));
    encode_tensors(&list)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureBundle> {
    let mut tensors = decode_tensors(bytes)?;
    let mut take = |name: &str| -> Result<Tensor> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| FormatError::Malformed(format!("missing tensor `{name}`")))?;
        Ok(tensors.swap_remove(i).1)
    };
    let appearance = take("appearance")?;
    let motion = take("motion")?;
    let question = take("question")?;
    let answers = [take("answer0")?, take("answer1")?, take("answer2")?, take("answer3")?];
    let label = take("label")?.data()[0];
    if label < 0.0 || label.fract() != 0.0 || label as usize >= CANDIDATES {
        return Err(FormatError::Malformed(format!("label {label} is not a candidate index")).into());
    }
    for t in [&appearance, &motion, &question].into_iter().chain(answers.iter()) {
        if t.shape().len() != 2 {
            return Err(FormatError::Malformed(format!("expected a matrix, got shape {:?}", t.shape())).into());
        }
    }
    Ok(FeatureBundle {
        appearance,
        motion,
        question,
        answers,
        label: label as usize,
    })
}

pub fn write_features(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    std::fs::write(path, encode_features(bundle)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureBundle> {
    decode_features(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Tensor {
        Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.125, 3.0, 4.0, -0.0]).unwrap()
    }

    #[test]
    fn tensors_round_trip() {
        let t = small();
        let bytes = encode_tensors(&[("x", &t)]).unwrap();
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "x");
        assert_eq!(back[0].1.data(), t.data());
    }

    #[test]
    fn header_errors_come_first() {
        let mut bytes = encode_tensors(&[("x", &small())]).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_tensors(&bytes).unwrap_err().code(), 1);
        let mut bytes = encode_tensors(&[("x", &small())]).unwrap();
        bytes[4] = 9;
        assert_eq!(decode_tensors(&bytes).unwrap_err().code(), 2);
        assert_eq!(decode_tensors(b"DR").unwrap_err().code(), 4);
    }

    #[test]
    fn corruption_and_truncation() {
        let bytes = encode_tensors(&[("x", &small())]).unwrap();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8] ^= 0x01;
        assert_eq!(decode_tensors(&bad).unwrap_err().code(), 3);
        assert_eq!(decode_tensors(&bytes[..n - 2]).unwrap_err().code(), 4);
        assert_eq!(decode_tensors(&bytes[..n - 10]).unwrap_err().code(), 4);
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode_tensors(&extra).unwrap_err().code(), 5);
    }
}
