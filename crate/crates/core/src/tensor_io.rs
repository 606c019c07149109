//! Weight-file container parsing and writing.
//!
//! The on-disk layout is the safetensors interchange format:
//!
//! ```text
//! [bytes 0..8]    u64 little-endian header length H
//! [bytes 8..8+H]  UTF-8 JSON: name -> {dtype, shape, data_offsets: [begin, end]}
//!                 plus an optional "__metadata__" string map
//! [bytes 8+H..]   contiguous little-endian tensor data; offsets are
//!                 relative to the end of the header
//! ```
//!
//! All values are widened to `f64` at load time; downstream spectral and
//! maximum-likelihood arithmetic is 64-bit throughout. NaN or infinite
//! values are a hard load error: a corrupt tensor invalidates every
//! metric computed from it.

use std::collections::BTreeMap;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element types accepted by the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F16,
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }
}

/// One named tensor: declared dtype, shape, and values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorEntry {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parsed weight container. Immutable after parse; safe to share across
/// parallel readers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

pub const MAX_SUPPORTED_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor data ranges overlap: {first} and {second}")]
    OverlappingRanges { first: String, second: String },
    #[error("tensor {tensor}: unsupported dtype {dtype}")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("tensor {tensor}: non-finite value at element {index}")]
    NonFiniteValue { tensor: String, index: usize },
}

#[derive(Debug, Error)]
pub enum WriteError {
    #[error("tensor {tensor}: value at element {index} not representable as {dtype}")]
    NonRepresentableValue {
        tensor: String,
        index: usize,
        dtype: &'static str,
    },
    #[error("tensor {tensor}: {declared} values declared by shape, {actual} present")]
    ShapeMismatch {
        tensor: String,
        declared: usize,
        actual: usize,
    },
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Parse a complete file image into a [`TensorStore`].
///
/// The parser never reads outside the declared buffer; truncated or
/// inconsistent files produce errors, not partial stores.
pub fn parse_container(bytes: &[u8]) -> Result<TensorStore, ParseError> {
    if bytes.len() < 8 {
        return Err(ParseError::MalformedHeader(format!(
            "file is {} bytes, need at least 8 for the length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().expect("slice of length 8"));
    let header_len: usize = header_len.try_into().map_err(|_| {
        ParseError::MalformedHeader("header length exceeds addressable memory".into())
    })?;
    let data_start = 8usize
        .checked_add(header_len)
        .ok_or_else(|| ParseError::MalformedHeader("header length overflows".into()))?;
    if data_start > bytes.len() {
        return Err(ParseError::MalformedHeader(format!(
            "declared header length {} exceeds file size {}",
            header_len,
            bytes.len()
        )));
    }

    let header_text = std::str::from_utf8(&bytes[8..data_start])
        .map_err(|e| ParseError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let raw: serde_json::Map<String, serde_json::Value> = serde_json::from_str(header_text)
        .map_err(|e| ParseError::MalformedHeader(format!("header is not a JSON object: {e}")))?;

    let data = &bytes[data_start..];
    let mut store = TensorStore::default();
    let mut ranges: Vec<(usize, usize, String)> = Vec::new();

    for (name, value) in raw {
        if name == "__metadata__" {
            let meta: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                ParseError::MalformedHeader(format!("__metadata__ is not a string map: {e}"))
            })?;
            store.metadata = meta;
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value).map_err(|e| {
            ParseError::MalformedHeader(format!("entry for tensor {name} is malformed: {e}"))
        })?;
        let dtype = match entry.dtype.as_str() {
            "F16" => Dtype::F16,
            "F32" => Dtype::F32,
            "F64" => Dtype::F64,
            other => {
                return Err(ParseError::UnsupportedDtype {
                    tensor: name,
                    dtype: other.to_string(),
                })
            }
        };
        let shape: Vec<usize> = entry
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<Result<_, _>>()
            .map_err(|_| {
                ParseError::MalformedHeader(format!("tensor {name}: shape entry too large"))
            })?;
        if shape.len() > MAX_SUPPORTED_RANK {
            return Err(ParseError::MalformedHeader(format!(
                "tensor {name}: rank {} exceeds supported maximum {MAX_SUPPORTED_RANK}",
                shape.len()
            )));
        }
        let element_count: usize = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                ParseError::MalformedHeader(format!("tensor {name}: shape product overflows"))
            })?;
        let [begin, end] = entry.data_offsets;
        let begin: usize = begin
            .try_into()
            .map_err(|_| ParseError::MalformedHeader(format!("tensor {name}: offset too large")))?;
        let end: usize = end
            .try_into()
            .map_err(|_| ParseError::MalformedHeader(format!("tensor {name}: offset too large")))?;
        if begin > end || end > data.len() {
            return Err(ParseError::MalformedHeader(format!(
                "tensor {name}: data range {begin}..{end} outside buffer of {} bytes",
                data.len()
            )));
        }
        let declared_bytes = element_count
            .checked_mul(dtype.byte_width())
            .ok_or_else(|| {
                ParseError::MalformedHeader(format!("tensor {name}: byte size overflows"))
            })?;
        if end - begin != declared_bytes {
            return Err(ParseError::MalformedHeader(format!(
                "tensor {name}: range holds {} bytes but shape {:?} as {} needs {declared_bytes}",
                end - begin,
                shape,
                dtype.as_str()
            )));
        }

        let values = decode_values(&data[begin..end], dtype, &name)?;
        ranges.push((begin, end, name.clone()));
        store.tensors.insert(
            name,
            TensorEntry {
                dtype,
                shape,
                values,
            },
        );
    }

    // Pairwise overlap check; zero-length ranges cannot overlap anything.
    ranges.sort();
    for pair in ranges.windows(2) {
        let (_, prev_end, ref prev_name) = pair[0];
        let (next_begin, next_end, ref next_name) = pair[1];
        if next_begin < prev_end && next_begin < next_end {
            return Err(ParseError::OverlappingRanges {
                first: prev_name.clone(),
                second: next_name.clone(),
            });
        }
    }

    Ok(store)
}

fn decode_values(bytes: &[u8], dtype: Dtype, name: &str) -> Result<Vec<f64>, ParseError> {
    let width = dtype.byte_width();
    debug_assert_eq!(bytes.len() % width, 0);
    let mut values = Vec::with_capacity(bytes.len() / width);
    for (index, chunk) in bytes.chunks_exact(width).enumerate() {
        let v = match dtype {
            Dtype::F16 => f64::from(f16::from_le_bytes([chunk[0], chunk[1]])),
            Dtype::F32 => f64::from(f32::from_le_bytes(chunk.try_into().expect("width 4"))),
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("width 8")),
        };
        if !v.is_finite() {
            return Err(ParseError::NonFiniteValue {
                tensor: name.to_string(),
                index,
            });
        }
        values.push(v);
    }
    Ok(values)
}

/// Serialize a store to the container format.
///
/// Output is canonical: tensors in name order, data packed contiguously
/// from offset 0, no header padding. A given store always produces the
/// same bytes, and `parse_container(write_container(s)) == s`.
pub fn write_container(store: &TensorStore) -> Result<Vec<u8>, WriteError> {
    let mut header = serde_json::Map::new();
    if !store.metadata.is_empty() {
        header.insert(
            "__metadata__".to_string(),
            serde_json::to_value(&store.metadata).expect("string map serializes"),
        );
    }

    let mut data = Vec::new();
    for (name, entry) in &store.tensors {
        let declared = entry.element_count();
        if declared != entry.values.len() {
            return Err(WriteError::ShapeMismatch {
                tensor: name.clone(),
                declared,
                actual: entry.values.len(),
            });
        }
        let begin = data.len();
        encode_values(&mut data, entry, name)?;
        let end = data.len();
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": entry.dtype.as_str(),
                "shape": entry.shape,
                "data_offsets": [begin, end],
            }),
        );
    }

    let header_bytes =
        serde_json::to_vec(&serde_json::Value::Object(header)).expect("header map serializes");
    let mut out = Vec::with_capacity(8 + header_bytes.len() + data.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&data);
    Ok(out)
}

fn encode_values(out: &mut Vec<u8>, entry: &TensorEntry, name: &str) -> Result<(), WriteError> {
    for (index, &v) in entry.values.iter().enumerate() {
        match entry.dtype {
            Dtype::F16 => {
                let narrowed = f16::from_f64(v);
                if !narrowed.is_finite() {
                    return Err(WriteError::NonRepresentableValue {
                        tensor: name.to_string(),
                        index,
                        dtype: "F16",
                    });
                }
                out.extend_from_slice(&narrowed.to_le_bytes());
            }
            Dtype::F32 => {
                let narrowed = v as f32;
                if !narrowed.is_finite() {
                    return Err(WriteError::NonRepresentableValue {
                        tensor: name.to_string(),
                        index,
                        dtype: "F32",
                    });
                }
                out.extend_from_slice(&narrowed.to_le_bytes());
            }
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(())
}
