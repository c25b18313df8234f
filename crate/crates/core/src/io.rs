//! Bit-exact binary persistence.
//!
//! Two formats, both little-endian throughout:
//!
//! * **Weight files** (`FCVT`): a JSON header mapping tensor names to
//!   shape, dtype, and payload location, followed by the raw values with
//!   every tensor 64-byte aligned. Saving the same tensors twice produces
//!   byte-identical files, and `load(save(x))` reproduces every value bit
//!   for bit.
//! * **Tensor files** (`FCTN`): a single unnamed tensor with an inline
//!   shape and dtype tag, used for CLI inputs and outputs.
//!
//! Loads are strict: wrong magic, unsupported version, overlapping or
//! misaligned offsets, and any mismatch between the declared and actual
//! file size are all rejected with a description of the problem.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const WEIGHT_MAGIC: [u8; 4] = *b"FCVT";
pub const TENSOR_MAGIC: [u8; 4] = *b"FCTN";
pub const FORMAT_VERSION: u32 = 1;
const PAYLOAD_ALIGN: usize = 64;

/// A loaded tensor whose element type was chosen by the file.
#[derive(Clone, Debug)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    /// Extracts the tensor when the stored dtype is exactly `E`, `None`
    /// otherwise. No conversion ever happens, so the values come back bit
    /// for bit.
    pub fn into_typed<E: Element>(self) -> Option<Tensor<E>> {
        if self.dtype() != E::DTYPE {
            return None;
        }
        let rebuild = |shape: Vec<usize>, data: Vec<E>| {
            Tensor::new(&shape, data).expect("shape and length are preserved")
        };
        Some(match self {
            DynTensor::F32(t) => {
                let shape = t.shape().to_vec();
                let data = t.data().iter().map(|&v| E::from_f64(f64::from(v))).collect();
                rebuild(shape, data)
            }
            DynTensor::F64(t) => {
                let shape = t.shape().to_vec();
                let data = t.data().iter().map(|&v| E::from_f64(v)).collect();
                rebuild(shape, data)
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_length: u64,
}

fn align_up(offset: usize, align: usize) -> usize {
    offset.div_ceil(align) * align
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Writes named tensors as one weight file. Tensors are laid out in name
/// order, each 64-byte aligned; duplicate names are rejected.
pub fn save_weights<E: Element>(path: &Path, tensors: &[(String, Tensor<E>)]) -> Result<()> {
    let mut ordered: BTreeMap<&str, &Tensor<E>> = BTreeMap::new();
    for (name, t) in tensors {
        if ordered.insert(name, t).is_some() {
            return Err(Error::invalid("save_weights", format!("duplicate tensor name {name:?}")));
        }
    }
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (&name, t) in &ordered {
        offset = align_up(offset, PAYLOAD_ALIGN);
        let length = t.numel() * E::DTYPE.size_bytes();
        header.insert(
            name,
            HeaderEntry {
                shape: t.shape().to_vec(),
                dtype: E::DTYPE.name().to_string(),
                byte_offset: offset as u64,
                byte_length: length as u64,
            },
        );
        offset += length;
    }
    let mut header_json = serde_json::to_vec(&header)?;
    while (16 + header_json.len()) % PAYLOAD_ALIGN != 0 {
        header_json.push(b' ');
    }
    let mut bytes = Vec::with_capacity(16 + header_json.len() + offset);
    bytes.extend_from_slice(&WEIGHT_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    let payload_start = bytes.len();
    for t in ordered.values() {
        while (bytes.len() - payload_start) % PAYLOAD_ALIGN != 0 {
            bytes.push(0);
        }
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    fs::write(path, &bytes)?;
    Ok(())
}

/// Reads a weight file back as a name-sorted map of dynamically typed
/// tensors, validating the layout exhaustively.
pub fn load_weights(path: &Path) -> Result<BTreeMap<String, DynTensor>> {
    let p = path_str(path);
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::format(&p, "file is too short to hold a header"));
    }
    if bytes[0..4] != WEIGHT_MAGIC {
        return Err(Error::format(&p, format!("bad magic {:?}, expected \"FCVT\"", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            &p,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = match usize::try_from(header_len).ok().and_then(|h| h.checked_add(16)) {
        Some(s) if s <= bytes.len() => s,
        _ => return Err(Error::format(&p, "declared header length extends past end of file")),
    };
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(bytes[16..payload_start].trim_ascii_end())
            .map_err(|e| Error::format(&p, format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut cursor = 0usize;
    let mut out = BTreeMap::new();
    for (name, entry) in &header {
        let dtype = DType::from_name(&entry.dtype).ok_or_else(|| {
            Error::format(&p, format!("tensor {name:?} has unknown dtype {:?}", entry.dtype))
        })?;
        let numel = entry.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let expected_len = numel.and_then(|n| n.checked_mul(dtype.size_bytes()));
        if expected_len != usize::try_from(entry.byte_length).ok() {
            return Err(Error::format(
                &p,
                format!(
                    "tensor {name:?}: byte_length {} does not match shape {:?} of dtype {}",
                    entry.byte_length,
                    entry.shape,
                    dtype.name()
                ),
            ));
        }
        let offset = usize::try_from(entry.byte_offset)
            .map_err(|_| Error::format(&p, format!("tensor {name:?}: offset overflows")))?;
        if offset % PAYLOAD_ALIGN != 0 {
            return Err(Error::format(
                &p,
                format!("tensor {name:?}: offset {offset} is not 64-byte aligned"),
            ));
        }
        if offset < cursor {
            return Err(Error::format(
                &p,
                format!("tensor {name:?}: offset {offset} overlaps the previous tensor"),
            ));
        }
        let end = offset + expected_len.unwrap();
        if end > payload.len() {
            return Err(Error::format(
                &p,
                format!("tensor {name:?} is truncated: needs {end} payload bytes, file has {}", payload.len()),
            ));
        }
        cursor = end;
        let data = &payload[offset..end];
        let tensor = match dtype {
            DType::F32 => DynTensor::F32(read_values::<f32>(&entry.shape, data)?),
            DType::F64 => DynTensor::F64(read_values::<f64>(&entry.shape, data)?),
        };
        out.insert(name.clone(), tensor);
    }
    if cursor != payload.len() {
        return Err(Error::format(
            &p,
            format!("file size does not match header: payload holds {} bytes, tensors end at {cursor}", payload.len()),
        ));
    }
    Ok(out)
}

fn read_values<E: Element>(shape: &[usize], data: &[u8]) -> Result<Tensor<E>> {
    let size = E::DTYPE.size_bytes();
    let values = data.chunks_exact(size).map(E::read_le).collect();
    Tensor::new(shape, values)
}

/// Writes a single tensor: magic, version, rank, extents, dtype tag,
/// raw values.
pub fn save_tensor<E: Element>(path: &Path, tensor: &Tensor<E>) -> Result<()> {
    let mut bytes = Vec::with_capacity(17 + tensor.rank() * 8 + tensor.numel() * E::DTYPE.size_bytes());
    bytes.extend_from_slice(&TENSOR_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    bytes.push(E::DTYPE.tag());
    for &v in tensor.data() {
        v.write_le(&mut bytes);
    }
    fs::write(path, &bytes)?;
    Ok(())
}

/// Reads a single-tensor file, checking the size exactly.
pub fn load_tensor(path: &Path) -> Result<DynTensor> {
    let p = path_str(path);
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::format(&p, "file is too short to hold a tensor header"));
    }
    if bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::format(&p, format!("bad magic {:?}, expected \"FCTN\"", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            &p,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + ndim * 8 + 1;
    if bytes.len() < header_end {
        return Err(Error::format(&p, format!("file ends inside the {ndim}-extent shape header")));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let tag = bytes[header_end - 1];
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::format(&p, format!("unknown dtype tag {tag}")))?;
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = numel
        .and_then(|n| n.checked_mul(dtype.size_bytes()))
        .and_then(|n| n.checked_add(header_end));
    if expected != Some(bytes.len()) {
        return Err(Error::format(
            &p,
            format!(
                "payload size mismatch: shape {shape:?} of dtype {} needs {:?} total bytes, file has {}",
                dtype.name(),
                expected,
                bytes.len()
            ),
        ));
    }
    let data = &bytes[header_end..];
    Ok(match dtype {
        DType::F32 => DynTensor::F32(read_values::<f32>(&shape, data)?),
        DType::F64 => DynTensor::F64(read_values::<f64>(&shape, data)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn sample_tensors() -> Vec<(String, Tensor<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        vec![
            ("b.mat".to_string(), crate::tensor::trunc_normal(&[5, 7], 1.0, &mut rng)),
            ("a.vec".to_string(), crate::tensor::trunc_normal(&[3], 1.0, &mut rng)),
            ("c.img".to_string(), crate::tensor::trunc_normal(&[2, 3, 4, 4], 1.0, &mut rng)),
        ]
    }

    #[test]
    fn weight_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        let tensors = sample_tensors();
        save_weights(&path, &tensors).expect("save");
        let loaded = load_weights(&path).expect("load");
        assert_eq!(loaded.len(), tensors.len());
        for (name, t) in &tensors {
            let back = loaded[name].clone().into_typed::<f32>().expect("dtype preserved");
            assert!(back.bit_eq(t), "tensor {name} changed across the round trip");
        }
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("w1"), dir.path().join("w2"));
        let tensors = sample_tensors();
        save_weights(&p1, &tensors).unwrap();
        save_weights(&p2, &tensors).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "save must be deterministic");
    }

    #[test]
    fn payload_offsets_are_aligned() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        save_weights(&path, &sample_tensors()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!((16 + header_len) % 64, 0, "payload must start 64-aligned");
        let header: BTreeMap<String, HeaderEntry> =
            serde_json::from_slice(bytes[16..16 + header_len].trim_ascii_end()).unwrap();
        for (name, e) in header {
            assert_eq!(e.byte_offset % 64, 0, "tensor {name} must sit on a 64-byte boundary");
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        let t = Tensor::<f32>::zeros(&[2]);
        let err = save_weights(&path, &[("x".to_string(), t.clone()), ("x".to_string(), t)])
            .expect_err("duplicates must fail");
        assert!(err.to_string().contains("duplicate"), "unexpected error: {err}");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        save_weights(&path, &sample_tensors()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_weights(&path).expect_err("bad magic must fail");
        assert!(err.to_string().contains("magic"), "unexpected error: {err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        save_weights(&path, &sample_tensors()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_weights(&path).expect_err("newer version must fail");
        assert!(err.to_string().contains("version"), "unexpected error: {err}");
    }

    #[test]
    fn size_mismatch_is_rejected_in_both_directions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        save_weights(&path, &sample_tensors()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_weights(&path).is_err(), "truncated file must fail");
        let mut grown = bytes.clone();
        grown.push(0);
        fs::write(&path, &grown).unwrap();
        assert!(load_weights(&path).is_err(), "oversized file must fail");
    }

    fn craft_weight_file(path: &Path, entries: &str, payload: &[u8]) {
        let mut header = entries.as_bytes().to_vec();
        while (16 + header.len()) % 64 != 0 {
            header.push(b' ');
        }
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&WEIGHT_MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(payload);
        fs::write(path, &bytes).unwrap();
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        let entries = concat!(
            "{\"a\":{\"shape\":[16],\"dtype\":\"f32\",\"byte_offset\":0,\"byte_length\":64},",
            "\"b\":{\"shape\":[16],\"dtype\":\"f32\",\"byte_offset\":0,\"byte_length\":64}}"
        );
        craft_weight_file(&path, entries, &[0u8; 64]);
        let err = load_weights(&path).expect_err("overlap must fail");
        assert!(err.to_string().contains("overlap"), "unexpected error: {err}");
    }

    #[test]
    fn misaligned_offset_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        let entries = "{\"a\":{\"shape\":[2],\"dtype\":\"f32\",\"byte_offset\":8,\"byte_length\":8}}";
        craft_weight_file(&path, entries, &[0u8; 16]);
        let err = load_weights(&path).expect_err("misalignment must fail");
        assert!(err.to_string().contains("aligned"), "unexpected error: {err}");
    }

    #[test]
    fn wrong_byte_length_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.fcvt");
        let entries = "{\"a\":{\"shape\":[3],\"dtype\":\"f32\",\"byte_offset\":0,\"byte_length\":16}}";
        craft_weight_file(&path, entries, &[0u8; 16]);
        let err = load_weights(&path).expect_err("length mismatch must fail");
        assert!(err.to_string().contains("byte_length"), "unexpected error: {err}");
    }

    #[test]
    fn tensor_file_round_trips_f32_and_f64() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t32: Tensor<f32> = crate::tensor::trunc_normal(&[2, 5], 1.0, &mut rng);
        let t64: Tensor<f64> = crate::tensor::trunc_normal(&[7], 1.0, &mut rng);
        let (p32, p64) = (dir.path().join("a.fctn"), dir.path().join("b.fctn"));
        save_tensor(&p32, &t32).unwrap();
        save_tensor(&p64, &t64).unwrap();
        let b32 = load_tensor(&p32).unwrap().into_typed::<f32>().expect("f32 file");
        let b64 = load_tensor(&p64).unwrap().into_typed::<f64>().expect("f64 file");
        assert!(b32.bit_eq(&t32));
        assert!(b64.bit_eq(&t64));
        assert!(load_tensor(&p32).unwrap().into_typed::<f64>().is_none(), "dtype must be strict");
    }

    #[test]
    fn tensor_file_size_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.fctn");
        save_tensor(&path, &Tensor::<f32>::zeros(&[4])).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_tensor(&path).expect_err("short payload must fail");
        assert!(err.to_string().contains("size mismatch"), "unexpected error: {err}");
    }

    proptest! {
        #[test]
        fn tensor_file_round_trip_preserves_arbitrary_values(
            values in proptest::collection::vec(-1e30f32..1e30, 1..40),
        ) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.fctn");
            let t = Tensor::new(&[values.len()], values).unwrap();
            save_tensor(&path, &t).unwrap();
            let back = load_tensor(&path).unwrap().into_typed::<f32>().unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
