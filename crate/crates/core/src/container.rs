//! Single-file tensor container ("LDTN"): magic bytes, version, a JSON header
//! mapping tensor names to (shape, dtype, byte offset), then raw little-endian
//! payloads aligned to 64 bytes. Trivially readable from any language; saving
//! the same content always produces identical bytes.

use crate::error::{CoreError, Result};
use crate::tensor::{BoolTensor, SpikeTensor, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"LDTN";
const VERSION: u16 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, HeaderEntry>,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F64(_) => "f64",
            Payload::I64(_) => "i64",
            Payload::Bool(_) => "u8-bool",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len() * 8,
            Payload::I64(v) => v.len() * 8,
            Payload::Bool(v) => v.len(),
        }
    }
}

/// In-memory view of a container: named tensors with shapes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: BTreeMap<String, (Vec<usize>, Payload)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        self.entries
            .insert(name.to_string(), (t.shape().to_vec(), Payload::F64(t.data().to_vec())));
    }

    pub fn put_f64(&mut self, name: &str, value: f64) {
        self.entries.insert(name.to_string(), (vec![1], Payload::F64(vec![value])));
    }

    pub fn put_f64_slice(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.insert(name.to_string(), (shape.to_vec(), Payload::F64(values.to_vec())));
    }

    pub fn put_i64_slice(&mut self, name: &str, shape: &[usize], values: &[i64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.insert(name.to_string(), (shape.to_vec(), Payload::I64(values.to_vec())));
    }

    pub fn put_u64(&mut self, name: &str, value: u64) {
        self.put_i64_slice(name, &[1], &[value as i64]);
    }

    pub fn put_bool(&mut self, name: &str, mask: &BoolTensor) {
        self.entries
            .insert(name.to_string(), (mask.shape().to_vec(), Payload::Bool(mask.data().to_vec())));
    }

    pub fn put_spikes(&mut self, name: &str, spikes: &SpikeTensor) {
        let data: Vec<i64> = spikes.data().iter().map(|&c| c as i64).collect();
        self.entries
            .insert(name.to_string(), (spikes.shape().to_vec(), Payload::I64(data)));
    }

    pub fn get_tensor(&self, name: &str) -> Result<Tensor> {
        match self.entries.get(name) {
            Some((shape, Payload::F64(data))) => Tensor::from_vec(shape, data.clone()),
            Some((_, p)) => Err(CoreError::Container(format!(
                "tensor '{name}' has dtype {} (wanted f64)",
                p.dtype()
            ))),
            None => Err(CoreError::Container(format!("missing tensor '{name}'"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<f64> {
        let t = self.get_tensor(name)?;
        if t.numel() != 1 {
            return Err(CoreError::Container(format!("'{name}' is not a scalar")));
        }
        Ok(t.item())
    }

    pub fn get_i64_slice(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.entries.get(name) {
            Some((shape, Payload::I64(data))) => Ok((shape, data)),
            Some((_, p)) => Err(CoreError::Container(format!(
                "tensor '{name}' has dtype {} (wanted i64)",
                p.dtype()
            ))),
            None => Err(CoreError::Container(format!("missing tensor '{name}'"))),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let (_, data) = self.get_i64_slice(name)?;
        if data.len() != 1 {
            return Err(CoreError::Container(format!("'{name}' is not a scalar")));
        }
        Ok(data[0] as u64)
    }

    pub fn get_bool(&self, name: &str) -> Result<BoolTensor> {
        match self.entries.get(name) {
            Some((shape, Payload::Bool(data))) => BoolTensor::from_vec(shape, data.clone()),
            Some((_, p)) => Err(CoreError::Container(format!(
                "tensor '{name}' has dtype {} (wanted u8-bool)",
                p.dtype()
            ))),
            None => Err(CoreError::Container(format!("missing tensor '{name}'"))),
        }
    }

    pub fn get_spikes(&self, name: &str) -> Result<SpikeTensor> {
        let (shape, data) = self.get_i64_slice(name)?;
        if shape.len() != 3 {
            return Err(CoreError::Container(format!("'{name}' is not [trial,bin,neuron]")));
        }
        let counts: Result<Vec<u32>> = data
            .iter()
            .map(|&v| {
                u32::try_from(v).map_err(|_| {
                    CoreError::Container(format!("'{name}' holds negative count {v}"))
                })
            })
            .collect();
        SpikeTensor::from_vec(shape[0], shape[1], shape[2], counts?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // Offsets depend on the header length and the header carries the
        // offsets, so grow a reserved header size until the render fits,
        // then pad with spaces (valid trailing JSON whitespace) to exactly
        // that size. The loop terminates: the reserved size only grows.
        let render = |header_len: usize| -> Vec<u8> {
            let mut header = Header { tensors: BTreeMap::new() };
            let mut offset = align_up(14 + header_len);
            for (name, (shape, payload)) in &self.entries {
                header.tensors.insert(
                    name.clone(),
                    HeaderEntry { shape: shape.clone(), dtype: payload.dtype().into(), offset: offset as u64 },
                );
                offset = align_up(offset + payload.byte_len());
            }
            serde_json::to_vec(&header).expect("header serialization")
        };
        let mut header_len = render(0).len();
        let mut rendered = loop {
            let r = render(header_len);
            if r.len() <= header_len {
                break r;
            }
            header_len = r.len();
        };
        rendered.resize(header_len, b' ');
        // Recover the offsets actually rendered, for payload placement.
        let header: Header = serde_json::from_slice(&rendered).expect("header reparse");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(rendered.len() as u64).to_le_bytes());
        out.extend_from_slice(&rendered);
        for (name, (_, payload)) in &self.entries {
            let target = header.tensors[name].offset as usize;
            out.resize(target, 0);
            match payload {
                Payload::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Payload::I64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Payload::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(CoreError::Container("bad magic".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::Container(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        if 14 + header_len > bytes.len() {
            return Err(CoreError::Container("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[14..14 + header_len])
            .map_err(|e| CoreError::Container(format!("header parse: {e}")))?;

        let mut entries = BTreeMap::new();
        for (name, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let payload = match e.dtype.as_str() {
                "f64" => {
                    let end = start + n * 8;
                    check_range(bytes, end, &name)?;
                    Payload::F64(
                        bytes[start..end]
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                "i64" => {
                    let end = start + n * 8;
                    check_range(bytes, end, &name)?;
                    Payload::I64(
                        bytes[start..end]
                            .chunks_exact(8)
                            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                "u8-bool" => {
                    let end = start + n;
                    check_range(bytes, end, &name)?;
                    Payload::Bool(bytes[start..end].iter().map(|&b| b != 0).collect())
                }
                other => {
                    return Err(CoreError::Container(format!("unknown dtype '{other}'")));
                }
            };
            entries.insert(name, (e.shape, payload));
        }
        Ok(TensorContainer { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn check_range(bytes: &[u8], end: usize, name: &str) -> Result<()> {
    if end > bytes.len() {
        Err(CoreError::Container(format!("payload for '{name}' out of bounds")))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.put_tensor("weights", &Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap());
        c.put_spikes("spikes", &SpikeTensor::from_vec(1, 2, 2, vec![0, 3, 1, 7]).unwrap());
        c.put_bool("mask", &BoolTensor::from_vec(&[4], vec![true, false, false, true]).unwrap());
        c.put_u64("step", 12345);
        c.put_f64("lr", 1e-3);
        c
    }

    #[test]
    fn roundtrip_preserves_content() {
        let c = sample();
        let bytes = c.to_bytes();
        let c2 = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(c, c2);
        assert_eq!(c2.get_u64("step").unwrap(), 12345);
        assert_eq!(c2.get_spikes("spikes").unwrap().get(0, 0, 1), 3);
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let again = TensorContainer::from_bytes(&bytes).unwrap().to_bytes();
        assert_eq!(bytes, again);
    }

    #[test]
    fn payloads_are_aligned() {
        let c = sample();
        let bytes = c.to_bytes();
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[14..14 + header_len]).unwrap();
        for e in header.tensors.values() {
            assert_eq!(e.offset % ALIGN as u64, 0, "offset {} not aligned", e.offset);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(TensorContainer::from_bytes(b"NOPE").is_err());
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(TensorContainer::from_bytes(&bytes).is_err());
    }
}
